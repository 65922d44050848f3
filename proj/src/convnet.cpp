#include "defreg/convnet.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>

#include "defreg/error.hpp"
#include "defreg/random.hpp"

namespace defreg {

namespace {

constexpr double kBatchNormEpsilon = 1e-5;
constexpr double kRunningMomentum = 0.9;

std::string enc_name(int level, int conv, const char* what) {
    return "enc" + std::to_string(level) + ".conv" + std::to_string(conv) + "." + what;
}
std::string dec_name(int level, const char* what) { return "dec" + std::to_string(level) + "." + what; }

int64_t product(const std::vector<int64_t>& shape) {
    int64_t p = 1;
    for (auto s : shape) p *= s;
    return p;
}

// Input channels of the decoder convolution at `level`.
int decoder_in_channels(const ConvNetConfig& cfg, int level) {
    const int up = level == cfg.levels - 1 ? cfg.filters(level) : cfg.filters(level + 1);
    return up + cfg.filters(level);
}

std::vector<ParamTensor> layout(const ConvNetConfig& cfg) {
    std::vector<ParamTensor> t;
    auto add = [&](std::string name, std::vector<int64_t> shape, bool trainable = true) {
        ParamTensor p;
        p.name = std::move(name);
        p.values.assign(static_cast<size_t>(product(shape)), 0.0);
        p.shape = std::move(shape);
        p.trainable = trainable;
        t.push_back(std::move(p));
    };
    const int64_t k = ConvNetConfig::kernel_size;
    int in = 2;
    for (int l = 0; l < cfg.levels; ++l) {
        const int f = cfg.filters(l);
        add(enc_name(l, 1, "weight"), {f, in, k, k, k});
        add(enc_name(l, 1, "bias"), {f});
        add(enc_name(l, 2, "weight"), {f, f, k, k, k});
        add(enc_name(l, 2, "bias"), {f});
        in = f;
    }
    for (int l = cfg.levels - 1; l >= 0; --l) {
        const int f = cfg.filters(l);
        add(dec_name(l, "conv.weight"), {f, decoder_in_channels(cfg, l), k, k, k});
        if (cfg.use_batchnorm) {
            add(dec_name(l, "bn.gamma"), {f});
            add(dec_name(l, "bn.beta"), {f});
            add(dec_name(l, "bn.running_mean"), {f}, false);
            add(dec_name(l, "bn.running_var"), {f}, false);
        } else {
            add(dec_name(l, "conv.bias"), {f});
        }
    }
    add("head.weight", {3, cfg.filters(0), 1, 1, 1});
    add("head.bias", {3});
    return t;
}

// ---------------------------------------------------------------------------
// Layer kernels

Activation make_activation(int64_t channels, const Dims& dims) {
    return Activation{channels, dims, std::vector<double>(static_cast<size_t>(channels * dims.count()), 0.0)};
}

// Valid output range [lo, hi) along an axis for kernel offset `off` (already minus the padding).
inline void valid_range(int64_t n, int64_t off, int64_t& lo, int64_t& hi) {
    lo = std::max<int64_t>(0, -off);
    hi = std::min<int64_t>(n, n - off);
}

// Same-padded (zero) cubic convolution. weight: [out][in][k][k][k].
Activation conv_forward(const Activation& in, const std::vector<double>& weight, const double* bias, int64_t out_c,
                        int64_t k) {
    const Dims& d = in.dims;
    const size_t nv = in.voxels();
    const int64_t pad = k / 2;
    Activation out = make_activation(out_c, d);

#pragma omp parallel for schedule(static)
    for (int64_t o = 0; o < out_c; ++o) {
        double* dst = out.data.data() + static_cast<size_t>(o) * nv;
        if (bias != nullptr) std::fill(dst, dst + nv, bias[o]);
        for (int64_t c = 0; c < in.channels; ++c) {
            const double* src = in.data.data() + static_cast<size_t>(c) * nv;
            for (int64_t dz = 0; dz < k; ++dz) {
                int64_t zlo, zhi;
                valid_range(d.nz, dz - pad, zlo, zhi);
                for (int64_t dy = 0; dy < k; ++dy) {
                    int64_t ylo, yhi;
                    valid_range(d.ny, dy - pad, ylo, yhi);
                    for (int64_t dx = 0; dx < k; ++dx) {
                        int64_t xlo, xhi;
                        valid_range(d.nx, dx - pad, xlo, xhi);
                        const double w = weight[static_cast<size_t>((((o * in.channels + c) * k + dz) * k + dy) * k + dx)];
                        if (w == 0.0) continue;
                        for (int64_t z = zlo; z < zhi; ++z) {
                            for (int64_t y = ylo; y < yhi; ++y) {
                                double* orow = dst + (z * d.ny + y) * d.nx;
                                const double* irow = src + ((z + dz - pad) * d.ny + (y + dy - pad)) * d.nx + (dx - pad);
                                for (int64_t x = xlo; x < xhi; ++x) orow[x] += w * irow[x];
                            }
                        }
                    }
                }
            }
        }
    }
    return out;
}

// Gradients of conv_forward. grad_in may be null when the input gradient is not needed.
void conv_backward(const Activation& in, const std::vector<double>& weight, const Activation& grad_out, int64_t k,
                   Activation* grad_in, std::vector<double>& grad_weight, std::vector<double>* grad_bias) {
    const Dims& d = in.dims;
    const size_t nv = in.voxels();
    const int64_t pad = k / 2;
    const int64_t out_c = grad_out.channels;
    const int64_t in_c = in.channels;

    if (grad_bias != nullptr) {
        for (int64_t o = 0; o < out_c; ++o) {
            const double* g = grad_out.data.data() + static_cast<size_t>(o) * nv;
            double s = 0.0;
            for (size_t i = 0; i < nv; ++i) s += g[i];
            (*grad_bias)[o] += s;
        }
    }

#pragma omp parallel for schedule(static)
    for (int64_t o = 0; o < out_c; ++o) {
        const double* g = grad_out.data.data() + static_cast<size_t>(o) * nv;
        for (int64_t c = 0; c < in_c; ++c) {
            const double* src = in.data.data() + static_cast<size_t>(c) * nv;
            for (int64_t dz = 0; dz < k; ++dz) {
                int64_t zlo, zhi;
                valid_range(d.nz, dz - pad, zlo, zhi);
                for (int64_t dy = 0; dy < k; ++dy) {
                    int64_t ylo, yhi;
                    valid_range(d.ny, dy - pad, ylo, yhi);
                    for (int64_t dx = 0; dx < k; ++dx) {
                        int64_t xlo, xhi;
                        valid_range(d.nx, dx - pad, xlo, xhi);
                        double s = 0.0;
                        for (int64_t z = zlo; z < zhi; ++z) {
                            for (int64_t y = ylo; y < yhi; ++y) {
                                const double* grow = g + (z * d.ny + y) * d.nx;
                                const double* irow = src + ((z + dz - pad) * d.ny + (y + dy - pad)) * d.nx + (dx - pad);
                                for (int64_t x = xlo; x < xhi; ++x) s += grow[x] * irow[x];
                            }
                        }
                        grad_weight[static_cast<size_t>((((o * in_c + c) * k + dz) * k + dy) * k + dx)] += s;
                    }
                }
            }
        }
    }

    if (grad_in == nullptr) return;
    *grad_in = make_activation(in_c, d);
#pragma omp parallel for schedule(static)
    for (int64_t c = 0; c < in_c; ++c) {
        double* dst = grad_in->data.data() + static_cast<size_t>(c) * nv;
        for (int64_t o = 0; o < out_c; ++o) {
            const double* g = grad_out.data.data() + static_cast<size_t>(o) * nv;
            for (int64_t dz = 0; dz < k; ++dz) {
                int64_t zlo, zhi;
                valid_range(d.nz, dz - pad, zlo, zhi);
                for (int64_t dy = 0; dy < k; ++dy) {
                    int64_t ylo, yhi;
                    valid_range(d.ny, dy - pad, ylo, yhi);
                    for (int64_t dx = 0; dx < k; ++dx) {
                        int64_t xlo, xhi;
                        valid_range(d.nx, dx - pad, xlo, xhi);
                        const double w = weight[static_cast<size_t>((((o * in_c + c) * k + dz) * k + dy) * k + dx)];
                        if (w == 0.0) continue;
                        for (int64_t z = zlo; z < zhi; ++z) {
                            for (int64_t y = ylo; y < yhi; ++y) {
                                const double* grow = g + (z * d.ny + y) * d.nx;
                                double* irow = dst + ((z + dz - pad) * d.ny + (y + dy - pad)) * d.nx + (dx - pad);
                                for (int64_t x = xlo; x < xhi; ++x) irow[x] += w * grow[x];
                            }
                        }
                    }
                }
            }
        }
    }
}

Activation relu(const Activation& z) {
    Activation a = z;
    for (auto& v : a.data) v = v > 0.0 ? v : 0.0;
    return a;
}

// grad *= (z > 0), in place.
void relu_backward(const Activation& z, Activation& grad) {
    for (size_t i = 0; i < grad.data.size(); ++i) {
        if (!(z.data[i] > 0.0)) grad.data[i] = 0.0;
    }
}

// 2x2x2 max pooling; ties go to the lowest linear index.
Activation maxpool(const Activation& in, std::vector<int64_t>& argmax) {
    const Dims& d = in.dims;
    const Dims od{d.nx / 2, d.ny / 2, d.nz / 2};
    Activation out = make_activation(in.channels, od);
    argmax.assign(out.data.size(), 0);
    const size_t nv = in.voxels();
    const size_t onv = out.voxels();
    for (int64_t c = 0; c < in.channels; ++c) {
        const double* src = in.data.data() + static_cast<size_t>(c) * nv;
        for (int64_t z = 0; z < od.nz; ++z) {
            for (int64_t y = 0; y < od.ny; ++y) {
                for (int64_t x = 0; x < od.nx; ++x) {
                    int64_t best = -1;
                    double best_v = 0.0;
                    for (int64_t dz = 0; dz < 2; ++dz)
                        for (int64_t dy = 0; dy < 2; ++dy)
                            for (int64_t dx = 0; dx < 2; ++dx) {
                                const int64_t idx = (2 * x + dx) + d.nx * ((2 * y + dy) + d.ny * (2 * z + dz));
                                if (best < 0 || src[idx] > best_v) {
                                    best = idx;
                                    best_v = src[idx];
                                }
                            }
                    const size_t o = static_cast<size_t>(c) * onv + static_cast<size_t>(x + od.nx * (y + od.ny * z));
                    out.data[o] = best_v;
                    argmax[o] = best;
                }
            }
        }
    }
    return out;
}

Activation maxpool_backward(const Activation& grad_out, const std::vector<int64_t>& argmax, const Dims& in_dims) {
    Activation g = make_activation(grad_out.channels, in_dims);
    const size_t nv = g.voxels();
    const size_t onv = grad_out.voxels();
    for (int64_t c = 0; c < grad_out.channels; ++c) {
        for (size_t o = 0; o < onv; ++o) {
            const size_t flat = static_cast<size_t>(c) * onv + o;
            g.data[static_cast<size_t>(c) * nv + static_cast<size_t>(argmax[flat])] += grad_out.data[flat];
        }
    }
    return g;
}

Activation upsample(const Activation& in) {
    const Dims& d = in.dims;
    const Dims od{2 * d.nx, 2 * d.ny, 2 * d.nz};
    Activation out = make_activation(in.channels, od);
    const size_t nv = in.voxels();
    const size_t onv = out.voxels();
    for (int64_t c = 0; c < in.channels; ++c) {
        for (int64_t z = 0; z < od.nz; ++z)
            for (int64_t y = 0; y < od.ny; ++y)
                for (int64_t x = 0; x < od.nx; ++x) {
                    out.data[static_cast<size_t>(c) * onv + static_cast<size_t>(x + od.nx * (y + od.ny * z))] =
                        in.data[static_cast<size_t>(c) * nv + static_cast<size_t>(x / 2 + d.nx * (y / 2 + d.ny * (z / 2)))];
                }
    }
    return out;
}

Activation upsample_backward(const Activation& grad_out, const Dims& in_dims) {
    Activation g = make_activation(grad_out.channels, in_dims);
    const Dims& od = grad_out.dims;
    const size_t nv = g.voxels();
    const size_t onv = grad_out.voxels();
    for (int64_t c = 0; c < grad_out.channels; ++c) {
        for (int64_t z = 0; z < od.nz; ++z)
            for (int64_t y = 0; y < od.ny; ++y)
                for (int64_t x = 0; x < od.nx; ++x) {
                    g.data[static_cast<size_t>(c) * nv + static_cast<size_t>(x / 2 + in_dims.nx * (y / 2 + in_dims.ny * (z / 2)))] +=
                        grad_out.data[static_cast<size_t>(c) * onv + static_cast<size_t>(x + od.nx * (y + od.ny * z))];
                }
    }
    return g;
}

Activation concat(const Activation& a, const Activation& b) {
    Activation out{a.channels + b.channels, a.dims, {}};
    out.data.reserve(a.data.size() + b.data.size());
    out.data.insert(out.data.end(), a.data.begin(), a.data.end());
    out.data.insert(out.data.end(), b.data.begin(), b.data.end());
    return out;
}

Activation channel_slice(const Activation& a, int64_t first, int64_t count) {
    const size_t nv = a.voxels();
    Activation out{count, a.dims, {}};
    out.data.assign(a.data.begin() + static_cast<std::ptrdiff_t>(first * nv),
                    a.data.begin() + static_cast<std::ptrdiff_t>((first + count) * nv));
    return out;
}

void add_into(Activation& dst, const Activation& src) {
    for (size_t i = 0; i < dst.data.size(); ++i) dst.data[i] += src.data[i];
}

void require(bool ok, const std::string& what) {
    if (!ok) throw ValidationError(what);
}

} // namespace

// ---------------------------------------------------------------------------

void ConvNetConfig::validate() const {
    require(levels >= 1, "convnet levels must be >= 1");
    require(base_filters >= 1, "convnet base_filters must be >= 1");
    require(levels <= 8, "convnet levels must be <= 8");
}

ConvNetParameters ConvNetParameters::zeros(const ConvNetConfig& cfg) {
    cfg.validate();
    ConvNetParameters p;
    p.config_ = cfg;
    p.tensors_ = layout(cfg);
    return p;
}

ConvNetParameters ConvNetParameters::initialize(const ConvNetConfig& cfg, uint64_t seed) {
    ConvNetParameters p = zeros(cfg);
    SplitMix64 rng(seed);
    for (auto& t : p.tensors_) {
        const bool is_hidden_weight = t.shape.size() == 5 && t.name.rfind("head", 0) != 0;
        if (is_hidden_weight) {
            const double fan_in = static_cast<double>(t.shape[1] * t.shape[2] * t.shape[3] * t.shape[4]);
            const double bound = std::sqrt(6.0 / fan_in);
            for (auto& v : t.values) v = static_cast<double>(static_cast<float>(rng.uniform(-bound, bound)));
        } else if (t.name.ends_with("bn.gamma") || t.name.ends_with("bn.running_var")) {
            std::fill(t.values.begin(), t.values.end(), 1.0);
        }
    }
    return p;
}

ParamTensor& ConvNetParameters::tensor(const std::string& name) {
    for (auto& t : tensors_)
        if (t.name == name) return t;
    throw ValidationError("no parameter tensor named " + name);
}

const ParamTensor& ConvNetParameters::tensor(const std::string& name) const {
    for (const auto& t : tensors_)
        if (t.name == name) return t;
    throw ValidationError("no parameter tensor named " + name);
}

size_t ConvNetParameters::trainable_count() const {
    size_t n = 0;
    for (const auto& t : tensors_)
        if (t.trainable) n += t.values.size();
    return n;
}

std::vector<double> ConvNetParameters::pack_trainable() const {
    std::vector<double> flat;
    flat.reserve(trainable_count());
    for (const auto& t : tensors_)
        if (t.trainable) flat.insert(flat.end(), t.values.begin(), t.values.end());
    return flat;
}

void ConvNetParameters::unpack_trainable(std::span<const double> flat) {
    require(flat.size() == trainable_count(), "unpack_trainable: size mismatch");
    size_t pos = 0;
    for (auto& t : tensors_) {
        if (!t.trainable) continue;
        std::copy(flat.begin() + static_cast<std::ptrdiff_t>(pos),
                  flat.begin() + static_cast<std::ptrdiff_t>(pos + t.values.size()), t.values.begin());
        pos += t.values.size();
    }
}

uint64_t ConvNetParameters::fingerprint() const {
    // FNV-1a over the raw bytes of every tensor.
    uint64_t h = 0xcbf29ce484222325ULL;
    for (const auto& t : tensors_) {
        for (double v : t.values) {
            const auto bits = std::bit_cast<uint64_t>(v);
            for (int b = 0; b < 8; ++b) {
                h ^= (bits >> (8 * b)) & 0xffu;
                h *= 0x100000001b3ULL;
            }
        }
    }
    return h;
}

bool ConvNetParameters::operator==(const ConvNetParameters& other) const {
    if (!(config_ == other.config_) || tensors_.size() != other.tensors_.size()) return false;
    for (size_t i = 0; i < tensors_.size(); ++i) {
        const auto& a = tensors_[i];
        const auto& b = other.tensors_[i];
        if (a.name != b.name || a.shape != b.shape || a.trainable != b.trainable) return false;
        if (a.values.size() != b.values.size()) return false;
        if (std::memcmp(a.values.data(), b.values.data(), a.values.size() * sizeof(double)) != 0) return false;
    }
    return true;
}

std::vector<double> ConvNetGradients::pack_trainable(const ConvNetParameters& params) const {
    std::vector<double> flat;
    flat.reserve(params.trainable_count());
    for (size_t i = 0; i < tensors.size(); ++i)
        if (params.tensors()[i].trainable) flat.insert(flat.end(), tensors[i].begin(), tensors[i].end());
    return flat;
}

// ---------------------------------------------------------------------------

ConvNetOutput convnet_forward(const ConvNetParameters& params, const Volume& fixed, const Volume& moving,
                              BatchNormMode mode) {
    const auto& cfg = params.config();
    cfg.validate();
    require(fixed.dims() == moving.dims(), "convnet_forward: fixed and moving dims differ");
    const Dims& d = fixed.dims();
    const int64_t m = int64_t{1} << cfg.levels;
    require(d.nx % m == 0 && d.ny % m == 0 && d.nz % m == 0,
            "convnet_forward: dims must be divisible by 2^levels = " + std::to_string(m));
    const auto expected = layout(cfg);
    require(expected.size() == params.tensors().size(), "convnet_forward: parameter layout does not match config");
    for (size_t i = 0; i < expected.size(); ++i) {
        require(expected[i].shape == params.tensors()[i].shape, "convnet_forward: shape mismatch for " + expected[i].name);
    }

    ConvNetOutput result;
    ConvNetCache& cache = result.cache;
    cache.config = cfg;
    cache.fingerprint = params.fingerprint();
    cache.mode = mode;
    cache.grid = fixed.grid();

    const int64_t k = ConvNetConfig::kernel_size;
    Activation x{2, d, {}};
    x.data.reserve(2 * fixed.size());
    x.data.insert(x.data.end(), fixed.data().begin(), fixed.data().end());
    x.data.insert(x.data.end(), moving.data().begin(), moving.data().end());

    cache.encoder.resize(static_cast<size_t>(cfg.levels));
    for (int l = 0; l < cfg.levels; ++l) {
        auto& e = cache.encoder[static_cast<size_t>(l)];
        const int64_t f = cfg.filters(l);
        e.input = std::move(x);
        e.z1 = conv_forward(e.input, params.tensor(enc_name(l, 1, "weight")).values,
                            params.tensor(enc_name(l, 1, "bias")).values.data(), f, k);
        e.a1 = relu(e.z1);
        e.z2 = conv_forward(e.a1, params.tensor(enc_name(l, 2, "weight")).values,
                            params.tensor(enc_name(l, 2, "bias")).values.data(), f, k);
        e.a2 = relu(e.z2);
        e.pooled = maxpool(e.a2, e.argmax);
        x = e.pooled;
    }

    cache.decoder.resize(static_cast<size_t>(cfg.levels));
    for (int l = cfg.levels - 1; l >= 0; --l) {
        auto& dc = cache.decoder[static_cast<size_t>(l)];
        const int64_t f = cfg.filters(l);
        dc.input_dims = x.dims;
        dc.input_channels = x.channels;
        dc.concat = concat(upsample(x), cache.encoder[static_cast<size_t>(l)].a2);
        const double* bias = cfg.use_batchnorm ? nullptr : params.tensor(dec_name(l, "conv.bias")).values.data();
        dc.pre_norm = conv_forward(dc.concat, params.tensor(dec_name(l, "conv.weight")).values, bias, f, k);

        if (cfg.use_batchnorm) {
            const auto& gamma = params.tensor(dec_name(l, "bn.gamma")).values;
            const auto& beta = params.tensor(dec_name(l, "bn.beta")).values;
            const auto& rmean = params.tensor(dec_name(l, "bn.running_mean")).values;
            const auto& rvar = params.tensor(dec_name(l, "bn.running_var")).values;
            const size_t nv = dc.pre_norm.voxels();
            dc.batch_mean.assign(static_cast<size_t>(f), 0.0);
            dc.batch_var.assign(static_cast<size_t>(f), 0.0);
            dc.inv_std.assign(static_cast<size_t>(f), 0.0);
            dc.pre_relu = make_activation(f, dc.pre_norm.dims);
            for (int64_t c = 0; c < f; ++c) {
                const double* z = dc.pre_norm.data.data() + static_cast<size_t>(c) * nv;
                double mean = 0.0, var = 0.0;
                if (mode == BatchNormMode::train) {
                    for (size_t i = 0; i < nv; ++i) mean += z[i];
                    mean /= static_cast<double>(nv);
                    for (size_t i = 0; i < nv; ++i) var += (z[i] - mean) * (z[i] - mean);
                    var /= static_cast<double>(nv);
                } else {
                    mean = rmean[c];
                    var = rvar[c];
                }
                const double inv = 1.0 / std::sqrt(var + kBatchNormEpsilon);
                dc.batch_mean[c] = mean;
                dc.batch_var[c] = var;
                dc.inv_std[c] = inv;
                double* y = dc.pre_relu.data.data() + static_cast<size_t>(c) * nv;
                for (size_t i = 0; i < nv; ++i) y[i] = gamma[c] * ((z[i] - mean) * inv) + beta[c];
            }
        } else {
            dc.pre_relu = dc.pre_norm;
        }
        x = relu(dc.pre_relu);
    }

    cache.head_input = std::move(x);
    const auto head = conv_forward(cache.head_input, params.tensor("head.weight").values,
                                   params.tensor("head.bias").values.data(), 3, 1);
    const size_t nv = head.voxels();
    std::vector<double> comps(3 * nv);
    for (size_t i = 0; i < nv; ++i)
        for (size_t c = 0; c < 3; ++c) comps[3 * i + c] = head.data[c * nv + i];
    result.field = DisplacementField(fixed.grid(), std::move(comps));
    return result;
}

ConvNetGradients convnet_backward(const ConvNetParameters& params, const ConvNetCache& cache,
                                  const DisplacementField& grad_field) {
    const auto& cfg = params.config();
    require(cache.config == cfg && cache.fingerprint == params.fingerprint(),
            "convnet_backward: cache was produced by different parameters");
    require(grad_field.dims() == cache.grid.dims, "convnet_backward: gradient field dims do not match the cache");
    require(cache.encoder.size() == static_cast<size_t>(cfg.levels), "convnet_backward: incomplete cache");

    ConvNetGradients grads;
    auto index_of = [&](const std::string& name) {
        const auto& ts = params.tensors();
        for (size_t i = 0; i < ts.size(); ++i)
            if (ts[i].name == name) return i;
        throw ValidationError("no parameter tensor named " + name);
    };
    for (const auto& t : params.tensors()) grads.tensors.emplace_back(t.values.size(), 0.0);
    auto grad_of = [&](const std::string& name) -> std::vector<double>& { return grads.tensors[index_of(name)]; };

    const int64_t k = ConvNetConfig::kernel_size;
    const size_t nv = cache.head_input.voxels();

    Activation g_head = make_activation(3, cache.head_input.dims);
    const auto gc = grad_field.components();
    for (size_t i = 0; i < nv; ++i)
        for (size_t c = 0; c < 3; ++c) g_head.data[c * nv + i] = gc[3 * i + c];

    Activation g;
    conv_backward(cache.head_input, params.tensor("head.weight").values, g_head, 1, &g, grad_of("head.weight"),
                  &grad_of("head.bias"));

    std::vector<Activation> g_skip(static_cast<size_t>(cfg.levels));
    for (int l = 0; l < cfg.levels; ++l) {
        const auto& dc = cache.decoder[static_cast<size_t>(l)];
        const int64_t f = cfg.filters(l);
        relu_backward(dc.pre_relu, g);

        Activation g_pre;
        if (cfg.use_batchnorm) {
            const auto& gamma = params.tensor(dec_name(l, "bn.gamma")).values;
            auto& g_gamma = grad_of(dec_name(l, "bn.gamma"));
            auto& g_beta = grad_of(dec_name(l, "bn.beta"));
            const size_t lv = dc.pre_norm.voxels();
            g_pre = make_activation(f, dc.pre_norm.dims);
            for (int64_t c = 0; c < f; ++c) {
                const double* z = dc.pre_norm.data.data() + static_cast<size_t>(c) * lv;
                const double* gy = g.data.data() + static_cast<size_t>(c) * lv;
                double* gz = g_pre.data.data() + static_cast<size_t>(c) * lv;
                const double mean = dc.batch_mean[c];
                const double inv = dc.inv_std[c];
                double sum_g = 0.0, sum_gx = 0.0;
                for (size_t i = 0; i < lv; ++i) {
                    const double xhat = (z[i] - mean) * inv;
                    sum_g += gy[i];
                    sum_gx += gy[i] * xhat;
                }
                g_beta[c] += sum_g;
                g_gamma[c] += sum_gx;
                if (cache.mode == BatchNormMode::train) {
                    const double n = static_cast<double>(lv);
                    for (size_t i = 0; i < lv; ++i) {
                        const double xhat = (z[i] - mean) * inv;
                        gz[i] = gamma[c] * inv / n * (n * gy[i] - sum_g - xhat * sum_gx);
                    }
                } else {
                    for (size_t i = 0; i < lv; ++i) gz[i] = gamma[c] * inv * gy[i];
                }
            }
        } else {
            g_pre = std::move(g);
        }

        Activation g_cat;
        conv_backward(dc.concat, params.tensor(dec_name(l, "conv.weight")).values, g_pre, k, &g_cat,
                      grad_of(dec_name(l, "conv.weight")),
                      cfg.use_batchnorm ? nullptr : &grad_of(dec_name(l, "conv.bias")));
        g_skip[static_cast<size_t>(l)] = channel_slice(g_cat, dc.input_channels, f);
        g = upsample_backward(channel_slice(g_cat, 0, dc.input_channels), dc.input_dims);
    }

    // g now holds the gradient w.r.t. the deepest pooled features.
    for (int l = cfg.levels - 1; l >= 0; --l) {
        const auto& e = cache.encoder[static_cast<size_t>(l)];
        Activation g_a2 = maxpool_backward(g, e.argmax, e.a2.dims);
        add_into(g_a2, g_skip[static_cast<size_t>(l)]);
        relu_backward(e.z2, g_a2);
        Activation g_a1;
        conv_backward(e.a1, params.tensor(enc_name(l, 2, "weight")).values, g_a2, k, &g_a1,
                      grad_of(enc_name(l, 2, "weight")), &grad_of(enc_name(l, 2, "bias")));
        relu_backward(e.z1, g_a1);
        Activation g_in;
        conv_backward(e.input, params.tensor(enc_name(l, 1, "weight")).values, g_a1, k, l > 0 ? &g_in : nullptr,
                      grad_of(enc_name(l, 1, "weight")), &grad_of(enc_name(l, 1, "bias")));
        g = std::move(g_in);
    }
    return grads;
}

void update_running_stats(ConvNetParameters& params, const ConvNetCache& cache) {
    const auto& cfg = params.config();
    if (!cfg.use_batchnorm || cache.mode != BatchNormMode::train) return;
    require(cache.config == cfg, "update_running_stats: cache config mismatch");
    for (int l = 0; l < cfg.levels; ++l) {
        const auto& dc = cache.decoder[static_cast<size_t>(l)];
        auto& rmean = params.tensor(dec_name(l, "bn.running_mean")).values;
        auto& rvar = params.tensor(dec_name(l, "bn.running_var")).values;
        for (size_t c = 0; c < rmean.size(); ++c) {
            rmean[c] = kRunningMomentum * rmean[c] + (1.0 - kRunningMomentum) * dc.batch_mean[c];
            rvar[c] = kRunningMomentum * rvar[c] + (1.0 - kRunningMomentum) * dc.batch_var[c];
        }
    }
}

} // namespace defreg
