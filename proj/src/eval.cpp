#include "defreg/eval.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <fstream>
#include <numeric>
#include <set>
#include <sstream>

#include "defreg/error.hpp"
#include "raw_io.hpp"

namespace defreg {

LandmarkSet::LandmarkSet(std::vector<Landmark> entries) : entries_(std::move(entries)) {
    std::set<int64_t> seen;
    for (const auto& lm : entries_) {
        if (!seen.insert(lm.id).second) throw ValidationError("duplicate landmark id " + std::to_string(lm.id));
        for (double c : lm.position) {
            if (!std::isfinite(c)) throw ValidationError("landmark " + std::to_string(lm.id) + " has a non-finite coordinate");
        }
    }
}

TransformedLandmarks transform_landmarks(const LandmarkSet& lms, const DisplacementField& field) {
    const Grid& g = field.grid();
    std::vector<Landmark> moved;
    TransformedLandmarks out;
    moved.reserve(lms.size());
    for (const auto& lm : lms.entries()) {
        const Vec3 c = g.to_voxel(lm.position);
        bool clamped = false;
        for (int a = 0; a < 3; ++a) {
            if (c[a] < 0.0 || c[a] > static_cast<double>(g.dims[a] - 1)) clamped = true;
        }
        moved.push_back({lm.id, lm.position + sample_field(field, lm.position)});
        out.clamped.push_back(clamped);
    }
    out.landmarks = LandmarkSet(std::move(moved));
    return out;
}

std::vector<double> landmark_errors(const LandmarkSet& predicted, const LandmarkSet& reference) {
    auto sorted = [](const LandmarkSet& s) {
        auto v = s.entries();
        std::sort(v.begin(), v.end(), [](const Landmark& a, const Landmark& b) { return a.id < b.id; });
        return v;
    };
    const auto p = sorted(predicted);
    const auto r = sorted(reference);
    if (p.size() != r.size()) throw ValidationError("landmark sets have different sizes");
    std::vector<double> errors;
    errors.reserve(p.size());
    for (size_t i = 0; i < p.size(); ++i) {
        if (p[i].id != r[i].id) throw ValidationError("landmark id sets differ (id " + std::to_string(p[i].id) + ")");
        errors.push_back(norm(p[i].position - r[i].position));
    }
    return errors;
}

double quantile(std::span<const double> values, double p) {
    if (values.empty()) throw ValidationError("quantile of an empty sequence");
    std::vector<double> v(values.begin(), values.end());
    std::sort(v.begin(), v.end());
    const double rank = static_cast<double>(v.size() - 1) * p;
    const auto lo = static_cast<size_t>(std::floor(rank));
    const size_t hi = std::min(lo + 1, v.size() - 1);
    const double frac = rank - static_cast<double>(lo);
    return v[lo] + (v[hi] - v[lo]) * frac;
}

double median(std::span<const double> values) { return quantile(values, 0.5); }

namespace {
double mean_of(std::span<const double> values) {
    return std::accumulate(values.begin(), values.end(), 0.0) / static_cast<double>(values.size());
}
} // namespace

CaseMetrics case_metrics(std::span<const double> errors_after, std::span<const double> errors_before,
                         const JacobianMap* jmap) {
    if (errors_after.empty()) throw ValidationError("case_metrics: no landmark errors");
    if (errors_after.size() != errors_before.size()) throw ValidationError("case_metrics: before/after lengths differ");

    CaseMetrics m;
    m.errors.assign(errors_after.begin(), errors_after.end());
    m.mae_median = median(errors_after);
    m.mae_mean = mean_of(errors_after);
    m.mtre = m.mae_mean;
    size_t improved = 0;
    for (size_t i = 0; i < errors_after.size(); ++i) {
        if (errors_after[i] < errors_before[i]) ++improved;
    }
    m.robustness = static_cast<double>(improved) / static_cast<double>(errors_after.size());
    if (jmap != nullptr) m.folding_fraction = folding_fraction(*jmap);
    return m;
}

CohortSummary cohort_summary(std::span<const double> values) {
    if (values.empty()) throw ValidationError("cohort_summary of an empty sequence");
    CohortSummary s;
    s.mean = mean_of(values);
    if (values.size() > 1) {
        double ss = 0.0;
        for (double v : values) ss += (v - s.mean) * (v - s.mean);
        s.stddev = std::sqrt(ss / static_cast<double>(values.size() - 1));
    }
    s.median = quantile(values, 0.5);
    s.q25 = quantile(values, 0.25);
    s.q75 = quantile(values, 0.75);
    return s;
}

namespace {

std::vector<std::string> split_csv(const std::string& line) {
    std::vector<std::string> out;
    std::string cell;
    std::istringstream ss(line);
    while (std::getline(ss, cell, ',')) out.push_back(cell);
    if (!line.empty() && line.back() == ',') out.emplace_back();
    return out;
}

std::string trim(std::string s) {
    const auto b = s.find_first_not_of(" \t\r");
    const auto e = s.find_last_not_of(" \t\r");
    return b == std::string::npos ? std::string() : s.substr(b, e - b + 1);
}

template <typename T>
T parse_number(const std::string& text, const std::string& where) {
    const std::string t = trim(text);
    T value{};
    const auto* first = t.data();
    const auto* last = t.data() + t.size();
    const auto [ptr, ec] = std::from_chars(first, last, value);
    if (ec != std::errc() || ptr != last || t.empty()) throw ValidationError("malformed number '" + t + "' " + where);
    return value;
}

std::string format_double(double v) {
    char buf[64];
    const auto [ptr, ec] = std::to_chars(buf, buf + sizeof(buf), v);
    return std::string(buf, ptr);
}

std::ofstream open_for_write(const std::filesystem::path& path) {
    detail::ensure_parent_dir(path);
    std::ofstream out(path, std::ios::trunc);
    if (!out) throw IoError("cannot write " + path.string());
    return out;
}

} // namespace

LandmarkSet load_landmarks(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw IoError("missing landmark file " + path.string());
    std::string line;
    if (!std::getline(in, line) || trim(line) != "id,x,y,z") {
        throw ValidationError("landmark file " + path.string() + " must start with header 'id,x,y,z'");
    }
    std::vector<Landmark> entries;
    int64_t row = 1;
    while (std::getline(in, line)) {
        ++row;
        if (trim(line).empty()) continue;
        const auto cells = split_csv(line);
        const std::string where = "at " + path.string() + ":" + std::to_string(row);
        if (cells.size() != 4) throw ValidationError("expected 4 columns " + where);
        Landmark lm;
        lm.id = parse_number<int64_t>(cells[0], where);
        for (int a = 0; a < 3; ++a) lm.position[a] = parse_number<double>(cells[a + 1], where);
        entries.push_back(lm);
    }
    return LandmarkSet(std::move(entries));
}

void save_landmarks(const LandmarkSet& lms, const std::filesystem::path& path) {
    auto out = open_for_write(path);
    out << "id,x,y,z\n";
    for (const auto& lm : lms.entries()) {
        out << lm.id << ',' << format_double(lm.position[0]) << ',' << format_double(lm.position[1]) << ','
            << format_double(lm.position[2]) << '\n';
    }
    if (!out) throw IoError("write failed: " + path.string());
}

void save_metrics(std::span<const CaseEvaluation> cases, const std::filesystem::path& csv_path) {
    auto out = open_for_write(csv_path);
    out << "case,initial_mae_median,method_mae_median,robustness,mtre,folding_fraction\n";
    for (const auto& c : cases) {
        out << c.case_id << ',' << format_double(c.initial_mae_median) << ',' << format_double(c.metrics.mae_median)
            << ',' << format_double(c.metrics.robustness) << ',' << format_double(c.metrics.mtre) << ','
            << (c.metrics.folding_fraction ? format_double(*c.metrics.folding_fraction) : std::string()) << '\n';
    }
    if (!out) throw IoError("write failed: " + csv_path.string());
}

nlohmann::json metrics_to_json(std::span<const CaseEvaluation> cases) {
    nlohmann::json j = nlohmann::json::array();
    std::vector<double> initial, method, robust;
    for (const auto& c : cases) {
        nlohmann::json e;
        e["case"] = c.case_id;
        e["initial_mae_median"] = c.initial_mae_median;
        e["mae_median"] = c.metrics.mae_median;
        e["mae_mean"] = c.metrics.mae_mean;
        e["mtre"] = c.metrics.mtre;
        e["robustness"] = c.metrics.robustness;
        e["folding_fraction"] = c.metrics.folding_fraction ? nlohmann::json(*c.metrics.folding_fraction) : nlohmann::json();
        e["errors"] = c.metrics.errors;
        e["initial_errors"] = c.initial_errors;
        j.push_back(e);
        initial.push_back(c.initial_mae_median);
        method.push_back(c.metrics.mae_median);
        robust.push_back(c.metrics.robustness);
    }
    auto summary = [](std::span<const double> v) {
        const auto s = cohort_summary(v);
        return nlohmann::json{{"mean", s.mean}, {"stddev", s.stddev}, {"median", s.median}, {"q25", s.q25}, {"q75", s.q75}};
    };
    nlohmann::json root{{"cases", j}};
    if (!cases.empty()) {
        root["cohort"] = {{"initial_mae_median", summary(initial)},
                          {"method_mae_median", summary(method)},
                          {"robustness", summary(robust)}};
    }
    return root;
}

void save_error_table(std::span<const CaseEvaluation> cases, const std::filesystem::path& csv_path) {
    auto out = open_for_write(csv_path);
    out << "case,method,error\n";
    for (const auto& c : cases) {
        for (double e : c.initial_errors) out << c.case_id << ",initial," << format_double(e) << '\n';
        for (double e : c.metrics.errors) out << c.case_id << ",registered," << format_double(e) << '\n';
    }
    if (!out) throw IoError("write failed: " + csv_path.string());
}

} // namespace defreg
