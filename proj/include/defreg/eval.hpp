#pragma once

#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "defreg/grid.hpp"
#include "defreg/warp.hpp"

namespace defreg {

struct Landmark {
    int64_t id = 0;
    Vec3 position{0.0, 0.0, 0.0};  // mm, world coordinates

    bool operator==(const Landmark&) const = default;
};

// Ids are unique; coordinates are finite.
class LandmarkSet {
  public:
    LandmarkSet() = default;
    explicit LandmarkSet(std::vector<Landmark> entries);

    const std::vector<Landmark>& entries() const { return entries_; }
    size_t size() const { return entries_.size(); }

    bool operator==(const LandmarkSet&) const = default;

  private:
    std::vector<Landmark> entries_;
};

struct TransformedLandmarks {
    LandmarkSet landmarks;
    std::vector<bool> clamped;  // point lay outside the field's sampling extent
};

// x -> x + u(x), u trilinearly sampled from the field.
TransformedLandmarks transform_landmarks(const LandmarkSet& lms, const DisplacementField& field);

// Euclidean distance per id, ordered by id. Both sets must carry the same ids.
std::vector<double> landmark_errors(const LandmarkSet& predicted, const LandmarkSet& reference);

struct CaseMetrics {
    double mae_median = 0.0;
    double mae_mean = 0.0;
    double mtre = 0.0;
    double robustness = 0.0;
    std::optional<double> folding_fraction;
    std::vector<double> errors;
};

// Robustness counts strict improvements (after < before).
CaseMetrics case_metrics(std::span<const double> errors_after, std::span<const double> errors_before,
                         const JacobianMap* jmap = nullptr);

struct CohortSummary {
    double mean = 0.0;
    double stddev = 0.0;  // sample (n-1); zero for a single value
    double median = 0.0;
    double q25 = 0.0;
    double q75 = 0.0;
};

// Linear interpolation between order statistics at zero-based rank (n-1)*p.
double quantile(std::span<const double> values, double p);
double median(std::span<const double> values);

CohortSummary cohort_summary(std::span<const double> values);

// CSV with header exactly "id,x,y,z".
LandmarkSet load_landmarks(const std::filesystem::path& path);
void save_landmarks(const LandmarkSet& lms, const std::filesystem::path& path);

struct CaseEvaluation {
    std::string case_id;
    double initial_mae_median = 0.0;
    CaseMetrics metrics;
    std::vector<double> initial_errors;
};

// case,initial_mae_median,method_mae_median,robustness,mtre,folding_fraction
void save_metrics(std::span<const CaseEvaluation> cases, const std::filesystem::path& csv_path);
nlohmann::json metrics_to_json(std::span<const CaseEvaluation> cases);

// Long format for box plots: case,method,error with methods "initial" and "registered".
void save_error_table(std::span<const CaseEvaluation> cases, const std::filesystem::path& csv_path);

} // namespace defreg
