#include "config_json.hpp"

#include <fstream>
#include <set>

#include "defreg/error.hpp"

namespace defreg::cli {

namespace {

using nlohmann::json;

void reject_unknown(const json& j, const std::set<std::string>& known, const std::string& where) {
    if (!j.is_object()) throw ValidationError(where + " must be a JSON object");
    for (const auto& [key, value] : j.items()) {
        if (!known.contains(key)) throw ValidationError("unknown config key '" + key + "' in " + where);
    }
}

template <typename T>
void take(const json& j, const char* key, T& dst) {
    if (!j.contains(key)) return;
    try {
        dst = j.at(key).get<T>();
    } catch (const json::exception&) {
        throw ValidationError(std::string("config key '") + key + "' has the wrong type");
    }
}

} // namespace

json to_json(const LossConfig& cfg) {
    return {{"ncc_window", cfg.ncc_window}, {"reg_weight", cfg.reg_weight}, {"variance_floor", cfg.variance_floor}};
}

json to_json(const ConvNetConfig& cfg) {
    return {{"levels", cfg.levels},
            {"base_filters", cfg.base_filters},
            {"use_batchnorm", cfg.use_batchnorm},
            {"kernel_size", ConvNetConfig::kernel_size}};
}

json to_json(const RegistrationConfig& cfg) {
    return {{"mode", to_string(cfg.mode)},
            {"pyramid_levels", cfg.pyramid_levels},
            {"iterations_per_level", cfg.iterations_per_level},
            {"learning_rate", cfg.learning_rate},
            {"convergence_tol", cfg.convergence_tol},
            {"max_seconds", cfg.max_seconds ? json(*cfg.max_seconds) : json()},
            {"seed", cfg.seed},
            {"loss", to_json(cfg.loss)},
            {"net", to_json(cfg.net)}};
}

void apply_json(const json& j, RegistrationConfig& cfg) {
    reject_unknown(j,
                   {"mode", "pyramid_levels", "iterations_per_level", "learning_rate", "convergence_tol", "max_seconds",
                    "seed", "loss", "net"},
                   "register config");
    if (j.contains("mode")) {
        if (!j["mode"].is_string()) throw ValidationError("config key 'mode' must be a string");
        cfg.mode = parse_mode(j["mode"].get<std::string>());
    }
    take(j, "pyramid_levels", cfg.pyramid_levels);
    take(j, "iterations_per_level", cfg.iterations_per_level);
    take(j, "learning_rate", cfg.learning_rate);
    take(j, "convergence_tol", cfg.convergence_tol);
    take(j, "seed", cfg.seed);
    if (j.contains("max_seconds")) {
        if (j["max_seconds"].is_null()) {
            cfg.max_seconds.reset();
        } else {
            double s = 0;
            take(j, "max_seconds", s);
            cfg.max_seconds = s;
        }
    }
    if (j.contains("loss")) {
        const auto& l = j["loss"];
        reject_unknown(l, {"ncc_window", "reg_weight", "variance_floor"}, "loss config");
        take(l, "ncc_window", cfg.loss.ncc_window);
        take(l, "reg_weight", cfg.loss.reg_weight);
        take(l, "variance_floor", cfg.loss.variance_floor);
    }
    if (j.contains("net")) {
        const auto& n = j["net"];
        reject_unknown(n, {"levels", "base_filters", "use_batchnorm", "kernel_size"}, "net config");
        take(n, "levels", cfg.net.levels);
        take(n, "base_filters", cfg.net.base_filters);
        take(n, "use_batchnorm", cfg.net.use_batchnorm);
        if (n.contains("kernel_size") && n["kernel_size"] != ConvNetConfig::kernel_size)
            throw ValidationError("only kernel_size 3 is supported");
    }
}

void apply_json(const json& j, SynthConfig& cfg) {
    reject_unknown(j,
                   {"dims", "spacing", "seed", "num_blobs", "field_bumps", "max_displacement", "num_landmarks",
                    "noise_sigma", "cavity"},
                   "synth config");
    if (j.contains("dims")) {
        std::vector<int64_t> d;
        take(j, "dims", d);
        if (d.size() != 3) throw ValidationError("synth dims must have 3 entries");
        cfg.dims = {d[0], d[1], d[2]};
    }
    if (j.contains("spacing")) {
        std::vector<double> s;
        take(j, "spacing", s);
        if (s.size() != 3) throw ValidationError("synth spacing must have 3 entries");
        cfg.spacing = {s[0], s[1], s[2]};
    }
    take(j, "seed", cfg.seed);
    take(j, "num_blobs", cfg.num_blobs);
    take(j, "field_bumps", cfg.field_bumps);
    take(j, "max_displacement", cfg.max_displacement);
    take(j, "num_landmarks", cfg.num_landmarks);
    take(j, "noise_sigma", cfg.noise_sigma);
    take(j, "cavity", cfg.cavity);
}

json read_config_file(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw IoError("cannot read config " + path.string());
    json j;
    try {
        j = json::parse(in);
    } catch (const json::parse_error& e) {
        throw ValidationError("malformed config " + path.string() + ": " + e.what());
    }
    if (j.is_object() && j.contains("config") && j.contains("command")) return j["config"];
    if (j.is_object() && j.contains("config") && j.contains("files")) return j["config"];
    return j;
}

} // namespace defreg::cli
