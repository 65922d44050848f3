#include "defreg/warp.hpp"

#include <algorithm>
#include <cmath>

#include "defreg/error.hpp"
#include "raw_io.hpp"

namespace defreg {

DisplacementField::DisplacementField(const Grid& grid) : grid_(grid), data_(3 * grid.count(), 0.0) { grid_.validate(); }

DisplacementField::DisplacementField(const Grid& grid, std::vector<double> components)
    : grid_(grid), data_(std::move(components)) {
    grid_.validate();
    if (data_.size() != 3 * grid_.count()) throw ValidationError("field component count does not match dims");
    for (double v : data_) {
        if (!std::isfinite(v)) throw ValidationError("field components must be finite");
    }
}

DisplacementField DisplacementField::constant(const Grid& grid, const Vec3& value) {
    DisplacementField f(grid);
    for (size_t i = 0; i < f.size(); ++i) f.set(i, value);
    return f;
}

namespace {

// Interpolation cell along one axis.
struct AxisCell {
    int64_t i0 = 0;
    int64_t i1 = 0;
    double t = 0.0;
    bool clamped = false;
};

AxisCell locate(double c, int64_t n) {
    AxisCell cell;
    if (n == 1) {
        cell.clamped = true;
        return cell;
    }
    const double hi = static_cast<double>(n - 1);
    if (c < 0.0) {
        c = 0.0;
        cell.clamped = true;
    } else if (c > hi) {
        c = hi;
        cell.clamped = true;
    }
    // ceil(c)-1 puts an exact integer node at t == 1 of the lower cell.
    cell.i0 = std::clamp(static_cast<int64_t>(std::ceil(c)) - 1, int64_t{0}, n - 2);
    cell.i1 = cell.i0 + 1;
    cell.t = c - static_cast<double>(cell.i0);
    return cell;
}

// Interpolates `stride`-interleaved channel `channel` of `data` on `grid`.
SampleGradient interpolate_voxel(const Grid& grid, const double* data, size_t stride, size_t channel, const Vec3& c,
                                 bool with_gradient) {
    const AxisCell cx = locate(c[0], grid.dims.nx);
    const AxisCell cy = locate(c[1], grid.dims.ny);
    const AxisCell cz = locate(c[2], grid.dims.nz);

    auto at = [&](int64_t i, int64_t j, int64_t k) { return data[stride * grid.index(i, j, k) + channel]; };
    const double v000 = at(cx.i0, cy.i0, cz.i0), v100 = at(cx.i1, cy.i0, cz.i0);
    const double v010 = at(cx.i0, cy.i1, cz.i0), v110 = at(cx.i1, cy.i1, cz.i0);
    const double v001 = at(cx.i0, cy.i0, cz.i1), v101 = at(cx.i1, cy.i0, cz.i1);
    const double v011 = at(cx.i0, cy.i1, cz.i1), v111 = at(cx.i1, cy.i1, cz.i1);

    const double tx = cx.t, ty = cy.t, tz = cz.t;
    const double c00 = v000 * (1.0 - tx) + v100 * tx;
    const double c10 = v010 * (1.0 - tx) + v110 * tx;
    const double c01 = v001 * (1.0 - tx) + v101 * tx;
    const double c11 = v011 * (1.0 - tx) + v111 * tx;
    const double c0 = c00 * (1.0 - ty) + c10 * ty;
    const double c1 = c01 * (1.0 - ty) + c11 * ty;

    SampleGradient out;
    out.value = c0 * (1.0 - tz) + c1 * tz;
    if (!with_gradient) return out;

    if (!cx.clamped) {
        const double d0 = (v100 - v000) * (1.0 - ty) + (v110 - v010) * ty;
        const double d1 = (v101 - v001) * (1.0 - ty) + (v111 - v011) * ty;
        out.gradient[0] = (d0 * (1.0 - tz) + d1 * tz) / grid.spacing[0];
    }
    if (!cy.clamped) {
        out.gradient[1] = ((c10 - c00) * (1.0 - tz) + (c11 - c01) * tz) / grid.spacing[1];
    }
    if (!cz.clamped) {
        out.gradient[2] = (c1 - c0) / grid.spacing[2];
    }
    return out;
}

SampleGradient interpolate(const Grid& grid, const double* data, size_t stride, size_t channel, const Vec3& p,
                           bool with_gradient) {
    return interpolate_voxel(grid, data, stride, channel, grid.to_voxel(p), with_gradient);
}

} // namespace

Vec3 displaced_voxel(const Grid& source, const Grid& target, int64_t i, int64_t j, int64_t k, const Vec3& u) {
    if (source == target) {
        return {static_cast<double>(i) + u[0] / source.spacing[0], static_cast<double>(j) + u[1] / source.spacing[1],
                static_cast<double>(k) + u[2] / source.spacing[2]};
    }
    return target.to_voxel(source.world(i, j, k) + u);
}

double sample_trilinear_voxel(const Volume& v, const Vec3& c) {
    return interpolate_voxel(v.grid(), v.data().data(), 1, 0, c, false).value;
}

SampleGradient sample_trilinear_gradient_voxel(const Volume& v, const Vec3& c) {
    return interpolate_voxel(v.grid(), v.data().data(), 1, 0, c, true);
}

double sample_trilinear(const Volume& v, const Vec3& p) {
    return interpolate(v.grid(), v.data().data(), 1, 0, p, false).value;
}

SampleGradient sample_trilinear_gradient(const Volume& v, const Vec3& p) {
    return interpolate(v.grid(), v.data().data(), 1, 0, p, true);
}

Vec3 sample_field(const DisplacementField& field, const Vec3& p) {
    const double* d = field.components().data();
    return {interpolate(field.grid(), d, 3, 0, p, false).value, interpolate(field.grid(), d, 3, 1, p, false).value,
            interpolate(field.grid(), d, 3, 2, p, false).value};
}

Volume warp_volume(const Volume& moving, const DisplacementField& field) {
    const Grid& g = field.grid();
    std::vector<double> out(g.count());
#pragma omp parallel for schedule(static)
    for (int64_t k = 0; k < g.dims.nz; ++k) {
        for (int64_t j = 0; j < g.dims.ny; ++j) {
            for (int64_t i = 0; i < g.dims.nx; ++i) {
                const size_t idx = g.index(i, j, k);
                out[idx] = sample_trilinear_voxel(moving, displaced_voxel(g, moving.grid(), i, j, k, field[idx]));
            }
        }
    }
    return Volume(g, std::move(out));
}

JacobianMap jacobian_determinant(const DisplacementField& field) {
    const Grid& g = field.grid();
    const Dims& d = g.dims;
    if (d.nx < 2 || d.ny < 2 || d.nz < 2) throw ValidationError("jacobian requires at least 2 voxels per axis");

    JacobianMap jm{g, std::vector<double>(g.count())};
    const double* u = field.components().data();

    // d u_c / d x_axis at voxel (i,j,k).
    auto derivative = [&](int64_t i, int64_t j, int64_t k, int axis, int c) {
        int64_t lo[3] = {i, j, k};
        int64_t hi[3] = {i, j, k};
        const int64_t pos = lo[axis];
        const int64_t n = d[axis];
        double span = 2.0;
        if (pos == 0) {
            hi[axis] = 1;
            span = 1.0;
        } else if (pos == n - 1) {
            lo[axis] = n - 2;
            span = 1.0;
        } else {
            lo[axis] = pos - 1;
            hi[axis] = pos + 1;
        }
        const double a = u[3 * g.index(hi[0], hi[1], hi[2]) + c];
        const double b = u[3 * g.index(lo[0], lo[1], lo[2]) + c];
        return (a - b) / (span * g.spacing[axis]);
    };

#pragma omp parallel for schedule(static)
    for (int64_t k = 0; k < d.nz; ++k) {
        for (int64_t j = 0; j < d.ny; ++j) {
            for (int64_t i = 0; i < d.nx; ++i) {
                double m[3][3];
                for (int c = 0; c < 3; ++c) {
                    for (int a = 0; a < 3; ++a) m[c][a] = (c == a ? 1.0 : 0.0) + derivative(i, j, k, a, c);
                }
                jm.data[g.index(i, j, k)] = m[0][0] * (m[1][1] * m[2][2] - m[1][2] * m[2][1]) -
                                            m[0][1] * (m[1][0] * m[2][2] - m[1][2] * m[2][0]) +
                                            m[0][2] * (m[1][0] * m[2][1] - m[1][1] * m[2][0]);
            }
        }
    }
    return jm;
}

double folding_fraction(const JacobianMap& jmap) {
    if (jmap.data.empty()) return 0.0;
    const auto folded = std::count_if(jmap.data.begin(), jmap.data.end(), [](double v) { return v <= 0.0; });
    return static_cast<double>(folded) / static_cast<double>(jmap.data.size());
}

Grid rescaled_grid(const Grid& grid, const Dims& new_dims) {
    if (new_dims.nx <= 0 || new_dims.ny <= 0 || new_dims.nz <= 0) throw ValidationError("resample dims must be positive");
    Grid out = grid;
    out.dims = new_dims;
    for (int a = 0; a < 3; ++a) {
        if (new_dims[a] == grid.dims[a]) continue;
        out.spacing[a] = grid.spacing[a] * static_cast<double>(grid.dims[a]) / static_cast<double>(new_dims[a]);
        out.origin[a] = grid.origin[a] + 0.5 * (out.spacing[a] - grid.spacing[a]);
    }
    return out;
}

DisplacementField resample_field_onto(const DisplacementField& field, const Grid& target) {
    DisplacementField out(target);
#pragma omp parallel for schedule(static)
    for (int64_t k = 0; k < target.dims.nz; ++k) {
        for (int64_t j = 0; j < target.dims.ny; ++j) {
            for (int64_t i = 0; i < target.dims.nx; ++i) {
                out.set(target.index(i, j, k), sample_field(field, target.world(i, j, k)));
            }
        }
    }
    return out;
}

DisplacementField resample_field(const DisplacementField& field, const Dims& new_dims) {
    if (new_dims == field.dims()) return field;
    return resample_field_onto(field, rescaled_grid(field.grid(), new_dims));
}

DisplacementField load_field(const std::filesystem::path& path) {
    const auto header = detail::read_header(path);
    if (header.channels != 3) throw FormatError(path.string() + " is not a 3-channel displacement field");
    auto data = detail::read_f32le(path, 3 * header.grid.count());
    return DisplacementField(header.grid, std::move(data));
}

void save_field(const DisplacementField& field, const std::filesystem::path& path) {
    VolumeHeader header;
    header.grid = field.grid();
    header.channels = 3;
    detail::write_f32le(field.components(), path);
    detail::write_header(header, path);
}

} // namespace defreg
