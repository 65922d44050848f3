#pragma once

#include "defreg/volume.hpp"
#include "defreg/warp.hpp"

namespace defreg {

struct LossConfig {
    int ncc_window = 9;            // cube side in voxels, odd
    double reg_weight = 1.0;       // lambda on the smoothness term
    double variance_floor = 1e-5;  // floor on the windowed std product

    void validate() const;
};

struct LossValue {
    double total = 0.0;
    double similarity = 0.0;
    double smoothness = 0.0;

    bool operator==(const LossValue&) const = default;
};

struct FieldLoss {
    double value = 0.0;
    DisplacementField grad;
};

struct OverallLoss {
    LossValue value;
    DisplacementField grad;
};

// Mean over voxel-centered windows (clipped at the borders) of the local correlation
// coefficient between the two volumes.
double ncc(const Volume& fixed, const Volume& warped, const LossConfig& cfg);

// -ncc(fixed, warp(moving, field)) and its gradient w.r.t. the field components.
FieldLoss similarity_loss(const Volume& fixed, const Volume& moving, const DisplacementField& field,
                          const LossConfig& cfg);

// Mean over voxels of |grad u|_F^2 with forward differences in mm (zero past the last voxel).
FieldLoss smoothness_loss(const DisplacementField& field);

// similarity + reg_weight * smoothness.
OverallLoss overall_loss(const Volume& fixed, const Volume& moving, const DisplacementField& field,
                         const LossConfig& cfg);

} // namespace defreg
