#include "cli.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <chrono>
#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <map>
#include <optional>
#include <sstream>

#include <CLI11.hpp>
#include <json.hpp>

#include "config_json.hpp"
#include "defreg/error.hpp"
#include "defreg/eval.hpp"
#include "defreg/parallel.hpp"
#include "defreg/register.hpp"
#include "defreg/synth.hpp"
#include "defreg/volume.hpp"
#include "defreg/warp.hpp"
#include "digest.hpp"

namespace defreg::cli {

namespace {

using nlohmann::json;
using Clock = std::chrono::steady_clock;
namespace fs = std::filesystem;

std::string fixed4(double v) {
    char buf[64];
    std::snprintf(buf, sizeof buf, "%.4f", v);
    return buf;
}

std::string shortest(double v) {
    char buf[64];
    auto r = std::to_chars(buf, buf + sizeof buf, v);
    return std::string(buf, r.ptr);
}

json dims_json(const Dims& d) { return json::array({d.nx, d.ny, d.nz}); }

json loss_json(const LossValue& l) {
    return {{"total", l.total}, {"similarity", l.similarity}, {"smoothness", l.smoothness}};
}

void write_json(const json& j, const fs::path& path) {
    if (path.has_parent_path()) fs::create_directories(path.parent_path());
    std::ofstream out(path, std::ios::trunc);
    if (!out) throw IoError("cannot write " + path.string());
    out << j.dump(2) << '\n';
    if (!out) throw IoError("write failed: " + path.string());
}

// Digest of a data file plus its JSON sidecar when one exists.
void add_input(json& inputs, const std::string& role, const fs::path& path) {
    if (!fs::exists(path)) throw IoError("missing input " + path.string());
    json entry{{"path", path.string()}, {"sha256", sha256_file(path)}};
    const fs::path sidecar = path.string() + ".json";
    if (fs::exists(sidecar)) entry["sidecar_sha256"] = sha256_file(sidecar);
    inputs[role] = entry;
}

struct Manifest {
    std::string command;
    std::vector<std::string> argv;
    json config = json::object();
    json inputs = json::object();
    json outputs = json::object();
    int threads = 0;

    json to_json(double wall_seconds) const {
        return {{"command", command},
                {"argv", argv},
                {"version", version()},
                {"config", config},
                {"inputs", inputs},
                {"outputs", outputs},
                {"threads", threads},
                {"wall_seconds", wall_seconds}};
    }
};

// --threads wins, then DEFREG_THREADS, then all cores.
int resolve_threads(std::optional<int> flag) {
    int n = 0;
    if (flag) {
        n = *flag;
    } else if (const char* env = std::getenv("DEFREG_THREADS"); env && *env) {
        const std::string s(env);
        auto r = std::from_chars(s.data(), s.data() + s.size(), n);
        if (r.ec != std::errc() || r.ptr != s.data() + s.size()) throw ValidationError("DEFREG_THREADS must be an integer");
    }
    if (n < 0) throw ValidationError("thread count must be >= 0");
    set_thread_count(n);
    return thread_count();
}

void add_threads_option(CLI::App* cmd, std::optional<int>& threads) {
    cmd->add_option("--threads", threads, "Worker threads; 0 = all cores (fallback: DEFREG_THREADS)")
        ->default_str("0");
}

// ---------------------------------------------------------------------------
// register

struct RegisterFlags {
    std::string fixed, moving, out_field, out_warped, report, manifest, out_checkpoint, config;
    std::optional<std::string> mode;
    std::optional<int> levels, iters, ncc_window, net_levels, base_filters;
    std::optional<double> lambda, lr, variance_floor, tol, max_seconds;
    std::optional<uint64_t> seed;
    std::optional<bool> batchnorm;
    std::optional<int> threads;
};

void setup_register(CLI::App& app, RegisterFlags& f) {
    auto* cmd = app.add_subcommand("register", "Register a moving volume onto a fixed volume");
    cmd->add_option("--fixed", f.fixed, "Fixed volume (.vol)")->required();
    cmd->add_option("--moving", f.moving, "Moving volume (.vol)")->required();
    cmd->add_option("--out-field", f.out_field, "Output displacement field (.dfield)")->required();
    cmd->add_option("--out-warped", f.out_warped, "Optional warped moving volume (.vol)");
    cmd->add_option("--report", f.report, "Report JSON")->default_str("<out-field>.report.json");
    cmd->add_option("--manifest", f.manifest, "Run manifest JSON")->default_str("<out-field>.manifest.json");
    cmd->add_option("--out-checkpoint", f.out_checkpoint, "Network checkpoint (convnet mode)");
    cmd->add_option("--config", f.config, "JSON config or run manifest; flags override it");
    cmd->add_option("--mode", f.mode, "freeform or convnet")->default_str("freeform");
    cmd->add_option("--pyramid-levels,--levels", f.levels, "Pyramid levels")->default_str("3 (convnet: 1)");
    cmd->add_option("--iterations-per-level,--iters", f.iters, "Adam iterations per level")
        ->default_str("200 (convnet: 100)");
    cmd->add_option("--learning-rate,--lr", f.lr, "Adam learning rate")->default_str("1.0 (convnet: 1e-4)");
    cmd->add_option("--reg-weight,--lambda", f.lambda, "Smoothness weight lambda")->default_str("1.0");
    cmd->add_option("--ncc-window", f.ncc_window, "Local NCC window side (odd, voxels)")->default_str("9");
    cmd->add_option("--variance-floor", f.variance_floor, "Floor on the windowed std product")->default_str("1e-5");
    cmd->add_option("--convergence-tol", f.tol, "Relative loss change over 10 iterations")->default_str("1e-6");
    cmd->add_option("--max-seconds", f.max_seconds, "Wall-clock budget in seconds")->default_str("none");
    cmd->add_option("--net-levels", f.net_levels, "ConvNet encoder depth")->default_str("3");
    cmd->add_option("--base-filters", f.base_filters, "ConvNet filters at the first level")->default_str("8");
    cmd->add_option("--use-batchnorm", f.batchnorm, "ConvNet decoder batch normalization (true/false)")
        ->default_str("true");
    cmd->add_option("--seed", f.seed, "Network initialization seed")->default_str("0");
    add_threads_option(cmd, f.threads);
}

RegistrationConfig resolve(const RegisterFlags& f) {
    json file = json::object();
    if (!f.config.empty()) file = read_config_file(f.config);

    Mode mode = Mode::freeform;
    if (f.mode) {
        mode = parse_mode(*f.mode);
    } else if (file.is_object() && file.contains("mode") && file["mode"].is_string()) {
        mode = parse_mode(file["mode"].get<std::string>());
    }
    RegistrationConfig cfg = RegistrationConfig::defaults(mode);
    if (!f.config.empty()) apply_json(file, cfg);
    cfg.mode = mode;

    if (f.levels) cfg.pyramid_levels = *f.levels;
    if (f.iters) cfg.iterations_per_level = *f.iters;
    if (f.lr) cfg.learning_rate = *f.lr;
    if (f.lambda) cfg.loss.reg_weight = *f.lambda;
    if (f.ncc_window) cfg.loss.ncc_window = *f.ncc_window;
    if (f.variance_floor) cfg.loss.variance_floor = *f.variance_floor;
    if (f.tol) cfg.convergence_tol = *f.tol;
    if (f.max_seconds) cfg.max_seconds = *f.max_seconds;
    if (f.net_levels) cfg.net.levels = *f.net_levels;
    if (f.base_filters) cfg.net.base_filters = *f.base_filters;
    if (f.batchnorm) cfg.net.use_batchnorm = *f.batchnorm;
    if (f.seed) cfg.seed = *f.seed;
    cfg.validate();
    return cfg;
}

int cmd_register(const RegisterFlags& f, Manifest& m, std::ostream& out) {
    const auto start = Clock::now();
    m.threads = resolve_threads(f.threads);
    const RegistrationConfig cfg = resolve(f);
    if (!f.out_checkpoint.empty() && cfg.mode != Mode::convnet)
        throw ValidationError("--out-checkpoint requires --mode convnet");
    m.config = to_json(cfg);

    add_input(m.inputs, "fixed", f.fixed);
    add_input(m.inputs, "moving", f.moving);
    const Volume fixed = load_volume(f.fixed);
    const Volume moving = load_volume(f.moving);

    const RegistrationReport r = register_pair(fixed, moving, cfg);

    save_field(r.field, f.out_field);
    m.outputs["field"] = f.out_field;
    if (!f.out_warped.empty()) {
        save_volume(warp_volume(moving, r.field), f.out_warped);
        m.outputs["warped"] = f.out_warped;
    }
    if (!f.out_checkpoint.empty() && r.network) {
        save_checkpoint(*r.network, f.out_checkpoint);
        m.outputs["checkpoint"] = f.out_checkpoint;
    }

    LossValue best;
    bool have_best = false;
    json levels = json::array();
    for (const auto& lt : r.levels) {
        json losses = json::array();
        for (const auto& l : lt.losses) losses.push_back(loss_json(l));
        levels.push_back({{"dims", dims_json(lt.dims)},
                          {"iterations", lt.iterations},
                          {"stop_reason", to_string(lt.stop)},
                          {"losses", losses}});
    }
    if (!r.levels.empty()) {
        for (const auto& l : r.levels.back().losses) {
            if (!have_best || l.total < best.total) best = l;
            have_best = true;
        }
    }

    const std::string report_path = f.report.empty() ? f.out_field + ".report.json" : f.report;
    json files{{"field", f.out_field}};
    if (!f.out_warped.empty()) files["warped"] = f.out_warped;
    if (!f.out_checkpoint.empty()) files["checkpoint"] = f.out_checkpoint;
    json report{{"config", m.config},
                {"levels", levels},
                {"final_loss", loss_json(best)},
                {"stop_reason", to_string(r.stop_reason)},
                {"iterations", r.iterations},
                {"wall_seconds", r.wall_seconds},
                {"input_dims", dims_json(r.input_dims)},
                {"padded_dims", dims_json(r.padded_dims)},
                {"files", files}};
    write_json(report, report_path);
    m.outputs["report"] = report_path;

    out << "loss=" << shortest(best.total) << " similarity=" << shortest(best.similarity)
        << " smoothness=" << shortest(best.smoothness) << " ncc=" << shortest(-best.similarity)
        << " iterations=" << r.iterations << " stop=" << to_string(r.stop_reason) << " seconds="
        << fixed4(std::chrono::duration<double>(Clock::now() - start).count()) << '\n';
    return 0;
}

// ---------------------------------------------------------------------------
// eval

struct EvalFlags {
    std::string field, fixed_lms, moving_lms, case_id = "case", out_metrics = "metrics.csv", out_json, out_errors,
                                               manifest, summarize, column;
    std::optional<int> threads;
};

void setup_eval(CLI::App& app, EvalFlags& f) {
    auto* cmd = app.add_subcommand("eval", "Landmark metrics for a field, or cohort statistics of a CSV column");
    cmd->add_option("--field", f.field, "Displacement field (.dfield) on the fixed grid");
    cmd->add_option("--fixed-landmarks", f.fixed_lms, "Landmarks on the fixed image (id,x,y,z)");
    cmd->add_option("--moving-landmarks", f.moving_lms, "Corresponding landmarks on the moving image");
    cmd->add_option("--case", f.case_id, "Case label in the metrics table")->capture_default_str();
    cmd->add_option("--out-metrics", f.out_metrics, "Metrics CSV")->capture_default_str();
    cmd->add_option("--out-json", f.out_json, "Metrics JSON")->default_str("<out-metrics stem>.json");
    cmd->add_option("--out-errors", f.out_errors, "Long-format per-landmark errors CSV")
        ->default_str("<out-metrics stem>_errors.csv");
    cmd->add_option("--manifest", f.manifest, "Run manifest JSON")->default_str("<output stem>.manifest.json");
    cmd->add_option("--summarize", f.summarize, "Cohort summary of one numeric CSV column");
    cmd->add_option("--column", f.column, "Column for --summarize")->default_str("the only column");
    add_threads_option(cmd, f.threads);
}

fs::path with_suffix(const fs::path& p, const std::string& suffix) {
    return p.parent_path() / (p.stem().string() + suffix);
}

std::vector<std::string> split_csv_line(const std::string& line) {
    std::vector<std::string> out;
    std::string cell;
    std::istringstream ss(line);
    while (std::getline(ss, cell, ',')) out.push_back(cell);
    if (!line.empty() && line.back() == ',') out.emplace_back();
    return out;
}

double parse_number(std::string s, const std::string& where) {
    while (!s.empty() && (s.back() == '\r' || s.back() == ' ')) s.pop_back();
    size_t b = 0;
    while (b < s.size() && s[b] == ' ') ++b;
    double v = 0;
    auto r = std::from_chars(s.data() + b, s.data() + s.size(), v);
    if (r.ec != std::errc() || r.ptr != s.data() + s.size() || !std::isfinite(v))
        throw ValidationError("not a number '" + s + "' in " + where);
    return v;
}

int cmd_summarize(const EvalFlags& f, Manifest& m, std::ostream& out) {
    add_input(m.inputs, "values", f.summarize);
    std::ifstream in(f.summarize);
    if (!in) throw IoError("cannot read " + f.summarize);
    std::string line;
    if (!std::getline(in, line)) throw ValidationError("empty CSV " + f.summarize);
    if (!line.empty() && line.back() == '\r') line.pop_back();
    const auto header = split_csv_line(line);
    size_t col = 0;
    if (f.column.empty()) {
        if (header.size() != 1) throw ValidationError("CSV has several columns; choose one with --column");
    } else {
        auto it = std::find(header.begin(), header.end(), f.column);
        if (it == header.end()) throw ValidationError("no column '" + f.column + "' in " + f.summarize);
        col = static_cast<size_t>(it - header.begin());
    }
    std::vector<double> values;
    int row = 1;
    while (std::getline(in, line)) {
        ++row;
        if (line.empty() || line == "\r") continue;
        const auto cells = split_csv_line(line);
        if (cells.size() != header.size()) throw ValidationError("row " + std::to_string(row) + " has the wrong width");
        values.push_back(parse_number(cells[col], f.summarize + " row " + std::to_string(row)));
    }
    const auto s = cohort_summary(values);
    m.config = {{"summarize", f.summarize}, {"column", header[col]}};

    const fs::path json_path = f.out_json.empty() ? fs::path(f.summarize + ".summary.json") : fs::path(f.out_json);
    write_json({{"column", header[col]},
                {"n", values.size()},
                {"mean", s.mean},
                {"stddev", s.stddev},
                {"median", s.median},
                {"q25", s.q25},
                {"q75", s.q75}},
               json_path);
    m.outputs["summary"] = json_path.string();

    out << "n=" << values.size() << " mean=" << fixed4(s.mean) << " stddev=" << fixed4(s.stddev)
        << " median=" << fixed4(s.median) << " q25=" << fixed4(s.q25) << " q75=" << fixed4(s.q75) << '\n';
    return 0;
}

int cmd_eval(const EvalFlags& f, Manifest& m, std::ostream& out, std::ostream& err) {
    m.threads = resolve_threads(f.threads);
    if (!f.summarize.empty()) {
        if (!f.field.empty() || !f.fixed_lms.empty() || !f.moving_lms.empty())
            throw ValidationError("--summarize cannot be combined with --field or landmark inputs");
        return cmd_summarize(f, m, out);
    }
    if (f.field.empty() || f.fixed_lms.empty() || f.moving_lms.empty())
        throw ValidationError("eval requires --field, --fixed-landmarks and --moving-landmarks (or --summarize)");

    add_input(m.inputs, "field", f.field);
    add_input(m.inputs, "fixed_landmarks", f.fixed_lms);
    add_input(m.inputs, "moving_landmarks", f.moving_lms);
    m.config = {{"case", f.case_id}};

    const auto field = load_field(f.field);
    const auto fixed_lms = load_landmarks(f.fixed_lms);
    const auto moving_lms = load_landmarks(f.moving_lms);

    const auto mapped = transform_landmarks(fixed_lms, field);
    const auto before = landmark_errors(fixed_lms, moving_lms);
    const auto after = landmark_errors(mapped.landmarks, moving_lms);
    std::optional<JacobianMap> jm;
    if (field.dims().nx >= 2 && field.dims().ny >= 2 && field.dims().nz >= 2) jm = jacobian_determinant(field);

    CaseEvaluation ce;
    ce.case_id = f.case_id;
    ce.metrics = case_metrics(after, before, jm ? &*jm : nullptr);
    ce.initial_errors = before;
    ce.initial_mae_median = median(before);
    const std::vector<CaseEvaluation> cases{ce};

    const fs::path csv = f.out_metrics;
    const fs::path jpath = f.out_json.empty() ? with_suffix(csv, ".json") : fs::path(f.out_json);
    const fs::path epath = f.out_errors.empty() ? with_suffix(csv, "_errors.csv") : fs::path(f.out_errors);
    save_metrics(cases, csv);
    auto j = metrics_to_json(cases);
    size_t clamped = 0;
    for (bool c : mapped.clamped) clamped += c ? 1 : 0;
    j["clamped_landmarks"] = clamped;
    write_json(j, jpath);
    save_error_table(cases, epath);
    m.outputs["metrics_csv"] = csv.string();
    m.outputs["metrics_json"] = jpath.string();
    m.outputs["errors_csv"] = epath.string();

    if (clamped > 0) err << "warning: " << clamped << " landmark(s) outside the field extent were clamped\n";
    out << "case=" << f.case_id << " initial_mae=" << fixed4(ce.initial_mae_median)
        << " mae=" << fixed4(ce.metrics.mae_median) << " robustness=" << fixed4(ce.metrics.robustness)
        << " mtre=" << fixed4(ce.metrics.mtre);
    if (ce.metrics.folding_fraction) out << " folding=" << fixed4(*ce.metrics.folding_fraction);
    out << '\n';
    return 0;
}

// ---------------------------------------------------------------------------
// synth

struct SynthFlags {
    std::string out, config;
    std::vector<int64_t> dims;
    std::vector<double> spacing;
    std::optional<uint64_t> seed;
    std::optional<int> blobs, bumps, landmarks;
    std::optional<double> max_disp, noise;
    bool cavity = false;
    std::optional<int> threads;
};

void setup_synth(CLI::App& app, SynthFlags& f) {
    auto* cmd = app.add_subcommand("synth", "Generate a synthetic case with known ground truth");
    cmd->add_option("--out", f.out, "Output directory")->required();
    cmd->add_option("--config", f.config, "JSON config or synth manifest; flags override it");
    cmd->add_option("--dims", f.dims, "Grid size: one value (cube) or three")->expected(1, 3)->default_str("48 48 48");
    cmd->add_option("--spacing", f.spacing, "Voxel spacing in mm: one value or three")
        ->expected(1, 3)
        ->default_str("1 1 1");
    cmd->add_option("--seed", f.seed, "Random seed")->default_str("0");
    cmd->add_option("--num-blobs", f.blobs, "Gaussian intensity blobs")->default_str("12");
    cmd->add_option("--field-bumps", f.bumps, "Smooth displacement bumps")->default_str("4");
    cmd->add_option("--max-displacement,--max-disp", f.max_disp, "Largest displacement in mm")->default_str("5");
    cmd->add_option("--num-landmarks", f.landmarks, "Landmark count")->default_str("20");
    cmd->add_option("--noise-sigma", f.noise, "Gaussian noise on the moving image")->default_str("0.02");
    cmd->add_flag("--cavity", f.cavity, "Simulate a resection cavity in the moving image (default off)");
    add_threads_option(cmd, f.threads);
}

int cmd_synth(const SynthFlags& f, Manifest& m, std::ostream& out, Clock::time_point start) {
    m.threads = resolve_threads(f.threads);
    SynthConfig cfg;
    if (!f.config.empty()) apply_json(read_config_file(f.config), cfg);
    auto triple = [](const auto& v, auto& dst, const char* what) {
        if (v.empty()) return;
        if (v.size() == 1) {
            dst = {v[0], v[0], v[0]};
        } else if (v.size() == 3) {
            dst = {v[0], v[1], v[2]};
        } else {
            throw ValidationError(std::string(what) + " takes one or three values");
        }
    };
    triple(f.dims, cfg.dims, "--dims");
    triple(f.spacing, cfg.spacing, "--spacing");
    if (f.seed) cfg.seed = *f.seed;
    if (f.blobs) cfg.num_blobs = *f.blobs;
    if (f.bumps) cfg.field_bumps = *f.bumps;
    if (f.max_disp) cfg.max_displacement = *f.max_disp;
    if (f.landmarks) cfg.num_landmarks = *f.landmarks;
    if (f.noise) cfg.noise_sigma = *f.noise;
    if (f.cavity) cfg.cavity = true;
    cfg.validate();

    const auto c = generate_case(cfg);
    const fs::path dir = f.out;
    fs::create_directories(dir);
    write_case(c, cfg, dir);

    // The case manifest written by write_case is extended into the run manifest.
    const fs::path mpath = dir / "manifest.json";
    json case_manifest;
    {
        std::ifstream in(mpath);
        case_manifest = json::parse(in);
    }
    m.config = case_manifest["config"];
    for (const auto& [role, name] : case_manifest["files"].items()) m.outputs[role] = (dir / name.get<std::string>()).string();
    json full = m.to_json(std::chrono::duration<double>(Clock::now() - start).count());
    full["files"] = case_manifest["files"];
    write_json(full, mpath);

    out << "case=" << dir.string() << " max_displacement=" << fixed4(cfg.max_displacement)
        << " landmarks=" << c.fixed_landmarks.size() << " folding=" << fixed4(folding_fraction(jacobian_determinant(c.true_field)))
        << '\n';
    return 0;
}

// ---------------------------------------------------------------------------
// slices

struct SlicesFlags {
    std::string volume, field, out, manifest, axis = "z";
    bool jacobian = false;
    std::optional<int64_t> index;
    std::optional<int> threads;
};

void setup_slices(CLI::App& app, SlicesFlags& f) {
    auto* cmd = app.add_subcommand("slices", "Export one slice as an 8-bit PGM image");
    cmd->add_option("--volume", f.volume, "Volume to slice; with --field it is warped first");
    cmd->add_option("--field", f.field, "Displacement field; alone it shows |u|");
    cmd->add_flag("--jacobian", f.jacobian, "Slice the Jacobian determinant of --field (default off)");
    cmd->add_option("--axis", f.axis, "Slice normal: x, y or z")->capture_default_str();
    cmd->add_option("--index", f.index, "Slice index along the axis")->default_str("middle");
    cmd->add_option("--out", f.out, "Output PGM")->required();
    cmd->add_option("--manifest", f.manifest, "Run manifest JSON")->default_str("<out>.manifest.json");
    add_threads_option(cmd, f.threads);
}

int cmd_slices(const SlicesFlags& f, Manifest& m, std::ostream& out) {
    m.threads = resolve_threads(f.threads);
    Axis axis;
    if (f.axis == "x") {
        axis = Axis::x;
    } else if (f.axis == "y") {
        axis = Axis::y;
    } else if (f.axis == "z") {
        axis = Axis::z;
    } else {
        throw ValidationError("--axis must be x, y or z");
    }
    if (f.volume.empty() && f.field.empty()) throw ValidationError("slices needs --volume and/or --field");
    if (f.jacobian && f.field.empty()) throw ValidationError("--jacobian requires --field");
    if (f.jacobian && !f.volume.empty()) throw ValidationError("--jacobian cannot be combined with --volume");

    std::string source;
    Volume image;
    if (!f.volume.empty()) add_input(m.inputs, "volume", f.volume);
    if (!f.field.empty()) add_input(m.inputs, "field", f.field);
    if (f.jacobian) {
        image = jacobian_determinant(load_field(f.field)).to_volume();
        source = "jacobian";
    } else if (!f.volume.empty() && !f.field.empty()) {
        image = warp_volume(load_volume(f.volume), load_field(f.field));
        source = "warped";
    } else if (!f.volume.empty()) {
        image = load_volume(f.volume);
        source = "volume";
    } else {
        const auto u = load_field(f.field);
        std::vector<double> mag(u.size());
        for (size_t i = 0; i < u.size(); ++i) mag[i] = norm(u[i]);
        image = Volume(u.grid(), std::move(mag));
        source = "magnitude";
    }
    const int64_t index = f.index ? *f.index : image.dims()[static_cast<int>(axis)] / 2;
    m.config = {{"axis", f.axis}, {"index", index}, {"source", source}};
    export_slice(image, axis, index, f.out);
    m.outputs["slice"] = f.out;
    out << "slice=" << f.out << " source=" << source << " axis=" << f.axis << " index=" << index << '\n';
    return 0;
}

} // namespace

std::string version() { return DEFREG_VERSION; }

int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
    const auto start = Clock::now();
    CLI::App app{"defreg: self-supervised deformable registration of 3D volume pairs", "defreg"};
    app.require_subcommand(1);
    app.set_help_all_flag("--help-all", "Help for every command");

    RegisterFlags rf;
    EvalFlags ef;
    SynthFlags sf;
    SlicesFlags lf;
    setup_register(app, rf);
    setup_eval(app, ef);
    setup_synth(app, sf);
    setup_slices(app, lf);
    app.add_subcommand("version", "Print the tool version");

    try {
        std::vector<std::string> reversed(args.rbegin(), args.rend());
        app.parse(reversed);
    } catch (const CLI::CallForHelp& e) {
        app.exit(e, out, err);
        return 0;
    } catch (const CLI::CallForAllHelp& e) {
        app.exit(e, out, err);
        return 0;
    } catch (const CLI::ParseError& e) {
        err << "error: " << e.what() << '\n';
        const auto* sub = app.get_subcommands().empty() ? &app : app.get_subcommands().front();
        err << "usage: " << sub->get_display_name() << " --help\n";
        return 1;
    }

    const auto* sub = app.get_subcommands().front();
    const std::string name = sub->get_name();
    Manifest manifest;
    manifest.command = name;
    manifest.argv = args;

    try {
        if (name == "version") {
            out << "defreg " << version() << '\n';
            return 0;
        }
        fs::path manifest_path;
        int code = 0;
        if (name == "register") {
            code = cmd_register(rf, manifest, out);
            manifest_path = rf.manifest.empty() ? fs::path(rf.out_field + ".manifest.json") : fs::path(rf.manifest);
        } else if (name == "eval") {
            code = cmd_eval(ef, manifest, out, err);
            if (!ef.manifest.empty()) {
                manifest_path = ef.manifest;
            } else if (!ef.summarize.empty()) {
                manifest_path = ef.summarize + ".summary.manifest.json";
            } else {
                manifest_path = with_suffix(ef.out_metrics, ".manifest.json");
            }
        } else if (name == "synth") {
            return cmd_synth(sf, manifest, out, start);
        } else if (name == "slices") {
            code = cmd_slices(lf, manifest, out);
            manifest_path = lf.manifest.empty() ? fs::path(lf.out + ".manifest.json") : fs::path(lf.manifest);
        }
        manifest.outputs["manifest"] = manifest_path.string();
        write_json(manifest.to_json(std::chrono::duration<double>(Clock::now() - start).count()), manifest_path);
        return code;
    } catch (const ValidationError& e) {
        err << "error: " << e.what() << '\n';
        return 1;
    } catch (const IoError& e) {
        err << "error: " << e.what() << '\n';
        return 2;
    } catch (const fs::filesystem_error& e) {
        err << "error: " << e.what() << '\n';
        return 2;
    } catch (const std::bad_alloc&) {
        err << "error: out of memory\n";
        return 2;
    } catch (const std::exception& e) {
        err << "error: " << e.what() << '\n';
        return 2;
    }
}

} // namespace defreg::cli
