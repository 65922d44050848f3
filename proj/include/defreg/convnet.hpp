#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "defreg/volume.hpp"
#include "defreg/warp.hpp"

namespace defreg {

struct ConvNetConfig {
    int levels = 3;
    int base_filters = 8;
    bool use_batchnorm = true;
    static constexpr int kernel_size = 3;

    void validate() const;
    int filters(int level) const { return base_filters << level; }
    bool operator==(const ConvNetConfig&) const = default;
};

struct ParamTensor {
    std::string name;
    std::vector<int64_t> shape;
    std::vector<double> values;
    bool trainable = true;
};

// Weights of the encoder-decoder. Tensors are kept in declaration order:
// encoder levels 0..L-1 (conv1, conv2), decoder levels L-1..0 (conv, batchnorm), head.
class ConvNetParameters {
  public:
    ConvNetParameters() = default;

    // Hidden convolutions: He-uniform with fan-in scaling, zero bias. Head: exactly zero.
    // Values are rounded to f32 so a fresh network round-trips through a checkpoint.
    static ConvNetParameters initialize(const ConvNetConfig& cfg, uint64_t seed);

    // Zero-valued tensors with the layout implied by cfg.
    static ConvNetParameters zeros(const ConvNetConfig& cfg);

    const ConvNetConfig& config() const { return config_; }
    std::vector<ParamTensor>& tensors() { return tensors_; }
    const std::vector<ParamTensor>& tensors() const { return tensors_; }
    ParamTensor& tensor(const std::string& name);
    const ParamTensor& tensor(const std::string& name) const;

    size_t trainable_count() const;
    std::vector<double> pack_trainable() const;
    void unpack_trainable(std::span<const double> flat);

    uint64_t fingerprint() const;

    bool operator==(const ConvNetParameters&) const;

  private:
    ConvNetConfig config_;
    std::vector<ParamTensor> tensors_;
};

// Gradient per tensor, same order and sizes as ConvNetParameters::tensors();
// non-trainable tensors (running statistics) get zeros.
struct ConvNetGradients {
    std::vector<std::vector<double>> tensors;

    std::vector<double> pack_trainable(const ConvNetParameters& params) const;
};

// Channel-major activations: data[c * voxels + voxel].
struct Activation {
    int64_t channels = 0;
    Dims dims;
    std::vector<double> data;

    size_t voxels() const { return static_cast<size_t>(dims.count()); }
};

enum class BatchNormMode { train, inference };

struct EncoderCache {
    Activation input, z1, a1, z2, a2, pooled;
    std::vector<int64_t> argmax;  // per pooled element, input linear index within its channel
};

struct DecoderCache {
    Dims input_dims;
    int64_t input_channels = 0;
    Activation concat, pre_norm, pre_relu;
    std::vector<double> batch_mean, batch_var, inv_std;
};

struct ConvNetCache {
    ConvNetConfig config;
    uint64_t fingerprint = 0;
    BatchNormMode mode = BatchNormMode::train;
    Grid grid;
    std::vector<EncoderCache> encoder;
    std::vector<DecoderCache> decoder;  // indexed by level
    Activation head_input;
};

struct ConvNetOutput {
    DisplacementField field;
    ConvNetCache cache;
};

// Predicts a displacement field (mm) on the fixed grid from the stacked (fixed, moving) pair.
ConvNetOutput convnet_forward(const ConvNetParameters& params, const Volume& fixed, const Volume& moving,
                              BatchNormMode mode = BatchNormMode::train);

// d loss / d parameters given d loss / d field. The cache must come from a forward pass
// with the same parameters.
ConvNetGradients convnet_backward(const ConvNetParameters& params, const ConvNetCache& cache,
                                  const DisplacementField& grad_field);

// Folds the batch statistics of a train-mode forward pass into the running averages (momentum 0.9).
void update_running_stats(ConvNetParameters& params, const ConvNetCache& cache);

// Versioned binary checkpoint ("IRNW"), f32 little-endian tensors in declaration order.
void save_checkpoint(const ConvNetParameters& params, const std::filesystem::path& path);
ConvNetParameters load_checkpoint(const std::filesystem::path& path);

} // namespace defreg
