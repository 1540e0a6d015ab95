#pragma once

#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "ttgan/layers.hpp"

namespace ttgan {

struct DenseNetConfig {
    std::size_t in_channels = 1;
    std::size_t outputs = 2;
    std::size_t depth = 30;
    std::size_t growth = 12;
    std::size_t blocks = 3;
    double reduction = 0.5;
    bool bottleneck = true;
    std::size_t gsp_position = 2;  // 0: no GSP block
    std::size_t rank = 20;
    std::size_t tt_cores = 3;
    double slope = 0.2;
    std::size_t contraction_threshold = 64;
    std::uint64_t seed = 1;
};

/// Layers per dense block implied by the depth: (depth - 4) / blocks.
std::size_t layers_per_block(const DenseNetConfig& c);

enum class LayerKind { tt_conv, batch_norm, dense_block, gsp, transition, average_pool, global_pool, tt_linear, softmax,
                       sigmoid };

std::string_view layer_kind_name(LayerKind k);

/// One entry of a network description. Nested dense-block and transition
/// contents appear as their own entries after the container.
struct LayerDesc {
    LayerKind kind;
    std::string name;
    std::size_t in_channels = 0;
    std::size_t out_channels = 0;
    const TTConv3d* conv = nullptr;
    const TTLinear* linear = nullptr;
    const BatchNorm* bn = nullptr;
    const GSPBlock* gsp = nullptr;
};

/// Parameter totals over a whole network. TT layers contribute their TT and
/// dense-equivalent counts; every other parameter counts on both sides.
struct NetworkParamCount {
    std::size_t tt_params = 0;
    std::size_t dense_params = 0;
    double ratio = 0.0;
};

/// 3D-DenseNet: initial 3x3x3 TT-conv, then per block [Dense-BC, optional GSP,
/// transition], global average pooling and a TT-linear head.
class DenseNet3d {
public:
    explicit DenseNet3d(std::string name, const DenseNetConfig& config);
    DenseNet3d(const DenseNet3d&) = delete;
    DenseNet3d& operator=(const DenseNet3d&) = delete;

    /// x: [N, W, H, L, in_channels] -> logits [N, outputs].
    ad::Variable forward(Forward& fwd, ad::Variable x) const;

    const DenseNetConfig& config() const noexcept { return config_; }
    const std::vector<LayerDesc>& description() const noexcept { return description_; }
    ParamRefs& params() noexcept { return params_; }
    const std::vector<BatchNorm*>& batch_norms() const noexcept { return bns_; }
    NetworkParamCount param_count() const;
    std::size_t gsp_count() const noexcept { return gsp_.has_value() ? 1 : 0; }

private:
    std::string name_;
    DenseNetConfig config_;
    std::unique_ptr<TTConv3d> stem_;
    std::vector<std::unique_ptr<DenseBlock3d>> blocks_;
    std::optional<GSPBlock> gsp_;
    std::vector<std::unique_ptr<Transition>> transitions_;
    std::unique_ptr<TTLinear> head_;
    std::vector<LayerDesc> description_;
    ParamRefs params_;
    std::vector<BatchNorm*> bns_;
};

/// Classifier network; throws ConfigError unless gsp_position is 1, 2 or 3.
std::unique_ptr<DenseNet3d> classifier_assemble(const DenseNetConfig& config);

struct GeneratorConfig {
    std::size_t latent_dim = 64;
    std::size_t classes = 2;
    std::size_t extent = 8;  // output volume is extent^3, a multiple of 8
    std::size_t base_channels = 32;
    std::uint64_t seed = 2;
};

/// Affine projection of z to a (extent/8)^3 grid, then three stride-2
/// transposed-conv stages with label channels concatenated at each stage.
class Generator {
public:
    explicit Generator(const GeneratorConfig& config);
    Generator(const Generator&) = delete;
    Generator& operator=(const Generator&) = delete;

    /// z: [N, latent]; onehot: [N, classes]. Output [N, e, e, e, 1] in (-1, 1).
    ad::Variable forward(Forward& fwd, ad::Variable z, const DenseTensor& onehot) const;

    const GeneratorConfig& config() const noexcept { return config_; }
    ParamRefs& params() noexcept { return params_; }
    const std::vector<BatchNorm*>& batch_norms() const noexcept { return bns_; }

private:
    GeneratorConfig config_;
    std::size_t base_;
    Param proj_w_, proj_b_;
    std::unique_ptr<BatchNorm> proj_bn_;
    std::vector<std::unique_ptr<GeneratorStage>> stages_;
    ParamRefs params_;
    std::vector<BatchNorm*> bns_;
};

}  // namespace ttgan
