#pragma once

#include <cstdint>
#include <map>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "ttgan/autodiff.hpp"
#include "ttgan/tt.hpp"

namespace ttgan {

/// A trainable tensor. `decay` selects it for weight decay.
struct Param {
    std::string name;
    DenseTensor value;
    bool decay = true;
};

using ParamRefs = std::vector<Param*>;

class BatchNorm;

/// Sums of per-batch statistics gathered during a statistics refresh pass.
struct BnAccumulator {
    DenseTensor mean_sum;
    DenseTensor var_sum;
    std::size_t batches = 0;
};

/// Per-forward state: the tape, the mode, and the parameter bindings.
class Forward {
public:
    Forward(ad::Tape& tape, bool training, bool trainable = true)
        : tape_(tape), training_(training), trainable_(trainable) {}

    ad::Tape& tape() noexcept { return tape_; }
    bool training() const noexcept { return training_; }

    /// The variable for `p`, created on first use (a parameter when trainable, else a constant).
    ad::Variable bind(const Param& p);
    /// Route `p` to an existing variable.
    void bind_to(const Param& p, ad::Variable v) { bound_[&p] = v; }
    const std::map<const Param*, ad::Variable>& bindings() const noexcept { return bound_; }

    /// When set, training-mode batch norms add their batch statistics here.
    std::map<const BatchNorm*, BnAccumulator>* bn_stats = nullptr;

private:
    ad::Tape& tape_;
    bool training_;
    bool trainable_;
    std::map<const Param*, ad::Variable> bound_;
};

/// Gradient of every bound parameter, in the order of `params`; zeros for unbound ones.
std::vector<DenseTensor> gather_gradients(const Forward& fwd, const ad::Gradients& grads, const ParamRefs& params);

// ---------------------------------------------------------------------------

class BatchNorm {
public:
    BatchNorm(std::string name, std::size_t channels);

    ad::Variable forward(Forward& fwd, ad::Variable x) const;
    void collect(ParamRefs& out) { out.push_back(&gamma_); out.push_back(&beta_); }
    std::size_t channels() const noexcept { return gamma_.value.size(); }
    const std::string& name() const noexcept { return name_; }

    DenseTensor running_mean;
    DenseTensor running_var;

private:
    std::string name_;
    Param gamma_;
    Param beta_;
};

/// Fully-connected layer whose weight is a TT-matrix.
class TTLinear {
public:
    TTLinear(std::string name, std::size_t in, std::size_t out, std::size_t rank, std::size_t cores,
             std::uint64_t seed);

    /// x: [N, in] -> [N, out].
    ad::Variable forward(Forward& fwd, ad::Variable x) const;
    void collect(ParamRefs& out);

    TTMatrix weight() const;
    const DenseTensor& bias() const noexcept { return bias_.value; }
    std::size_t in_features() const noexcept { return in_; }
    std::size_t out_features() const noexcept { return out_; }
    std::vector<Param>& cores() noexcept { return cores_; }
    Param& bias_param() noexcept { return bias_; }
    ParamCount param_count() const { return tt_param_count(weight()); }
    const std::string& name() const noexcept { return name_; }

private:
    std::string name_;
    std::size_t in_, out_;
    std::vector<Param> cores_;  // [r, m_k (out), n_k (in), r']
    Param bias_;
};

enum class ConvPath { automatic, materialized, contraction };

/// 3-D convolution whose kernel is K(i,j,k,c,s) = G0[i,j,k,:] G1[:,c1,s1,:] ... Gd[:,cd,sd,:].
class TTConv3d {
public:
    TTConv3d(std::string name, std::size_t in_channels, std::size_t out_channels, std::size_t kernel,
             std::size_t stride, std::size_t pad, std::size_t rank, std::size_t cores, std::uint64_t seed);

    /// x: [N, W, H, L, C] -> [N, W', H', L', S].
    ad::Variable forward(Forward& fwd, ad::Variable x, ConvPath path = ConvPath::automatic) const;
    void collect(ParamRefs& out);

    /// Dense [l, l, l, C, S] kernel.
    DenseTensor materialize_kernel() const;
    /// The kernel as a tensor train over modes [l^3, c1*s1, ..., cd*sd].
    TTTensor as_tt_tensor() const;
    ParamCount param_count() const;

    Param& spatial_core() noexcept { return spatial_; }
    const Param& spatial_core() const noexcept { return spatial_; }
    std::vector<Param>& channel_cores() noexcept { return cores_; }
    const std::vector<Param>& channel_cores() const noexcept { return cores_; }
    const Shape& in_modes() const noexcept { return in_modes_; }
    const Shape& out_modes() const noexcept { return out_modes_; }
    std::size_t in_channels() const noexcept { return in_; }
    std::size_t out_channels() const noexcept { return out_; }
    std::size_t kernel() const noexcept { return kernel_; }
    std::size_t stride() const noexcept { return stride_; }
    std::size_t pad() const noexcept { return pad_; }
    const std::string& name() const noexcept { return name_; }

    /// Input channel count above which the automatic path contracts cores instead of materializing.
    std::size_t contraction_threshold = 64;

private:
    std::string name_;
    std::size_t in_, out_, kernel_, stride_, pad_;
    Shape in_modes_, out_modes_;
    Param spatial_;             // [l, l, l, r0']
    std::vector<Param> cores_;  // [r, c_k, s_k, r']
};

/// Per-sample tensors recorded by GSPBlock::forward for inspection.
struct GspTrace {
    DenseTensor covariance;  // [N, c, c]
    DenseTensor weights;     // [N, c']
};

/// Global second-order pooling: reduce to c channels, channel covariance, row-wise
/// L2 normalization, per-row affine + LReLU, affine + sigmoid, channel scaling.
class GSPBlock {
public:
    GSPBlock(std::string name, std::size_t channels, std::uint64_t seed, std::size_t row_units = 4,
             double slope = 0.2);

    /// x: [N, W, H, L, c'] -> same shape. `weight_override` ([N, c'] or [c']) replaces the sigmoid output.
    ad::Variable forward(Forward& fwd, ad::Variable x, GspTrace* trace = nullptr,
                         const DenseTensor* weight_override = nullptr) const;
    void collect(ParamRefs& out);

    std::size_t channels() const noexcept { return channels_; }
    std::size_t reduced() const noexcept { return reduced_; }
    std::size_t row_units() const noexcept { return units_; }
    Param& reduce_weight() noexcept { return reduce_w_; }
    Param& reduce_bias() noexcept { return reduce_b_; }
    Param& row_weight() noexcept { return row_w_; }
    Param& row_bias() noexcept { return row_b_; }
    Param& excite_weight() noexcept { return excite_w_; }
    Param& excite_bias() noexcept { return excite_b_; }

private:
    std::size_t channels_, reduced_, units_;
    double slope_;
    Param reduce_w_, reduce_b_;  // [c', c], [c]
    Param row_w_, row_b_;        // [c, h], [h]
    Param excite_w_, excite_b_;  // [c*h, c'], [c']
};

/// One Dense-BC unit: BN-LReLU-conv1x1 (to 4g) then BN-LReLU-conv3x3 (to g).
/// Without the bottleneck it is BN-LReLU-conv3x3 only.
class DenseUnit {
public:
    DenseUnit(std::string name, std::size_t in_channels, std::size_t growth, bool bottleneck, std::size_t rank,
              std::size_t cores, std::uint64_t seed, double slope);

    ad::Variable forward(Forward& fwd, ad::Variable x) const;
    void collect(ParamRefs& out);
    void collect_bn(std::vector<BatchNorm*>& out);
    std::vector<const TTConv3d*> convs() const;
    std::vector<TTConv3d*> convs();

private:
    double slope_;
    std::optional<BatchNorm> bn1_;
    std::optional<TTConv3d> conv1_;
    BatchNorm bn2_;
    TTConv3d conv2_;
};

class DenseBlock3d {
public:
    DenseBlock3d(std::string name, std::size_t in_channels, std::size_t layers, std::size_t growth,
                 bool bottleneck, std::size_t rank, std::size_t cores, std::uint64_t seed, double slope = 0.2);

    /// Output = concat(x, unit outputs...), channels in_channels + units * growth.
    ad::Variable forward(Forward& fwd, ad::Variable x) const;
    void collect(ParamRefs& out);
    void collect_bn(std::vector<BatchNorm*>& out);

    std::size_t in_channels() const noexcept { return in_; }
    std::size_t out_channels() const noexcept { return in_ + units_.size() * growth_; }
    std::size_t unit_count() const noexcept { return units_.size(); }
    std::size_t growth() const noexcept { return growth_; }
    std::vector<DenseUnit>& units() noexcept { return units_; }
    const std::vector<DenseUnit>& units() const noexcept { return units_; }

private:
    std::size_t in_, growth_;
    std::vector<DenseUnit> units_;
};

/// BN-LReLU, 1x1x1 TT-conv to floor(reduction * C) channels, 2x2x2 average pooling.
class Transition {
public:
    Transition(std::string name, std::size_t in_channels, double reduction, std::size_t rank, std::size_t cores,
               std::uint64_t seed, double slope = 0.2);

    ad::Variable forward(Forward& fwd, ad::Variable x) const;
    void collect(ParamRefs& out);
    void collect_bn(std::vector<BatchNorm*>& out) { out.push_back(&bn_); }

    std::size_t out_channels() const noexcept { return conv_.out_channels(); }
    const TTConv3d& conv() const noexcept { return conv_; }
    TTConv3d& conv() noexcept { return conv_; }

private:
    double slope_;
    BatchNorm bn_;
    TTConv3d conv_;
};

/// Generator upsampling stage: concat label channels, stride-2 transposed conv
/// (kernel 4, pad 1), then BN + ReLU, or tanh for the final stage.
class GeneratorStage {
public:
    GeneratorStage(std::string name, std::size_t in_channels, std::size_t label_channels,
                   std::size_t out_channels, bool final_stage, std::uint64_t seed);

    /// x: [N, W, H, L, C]; onehot: [N, K]. Output [N, 2W, 2H, 2L, out].
    ad::Variable forward(Forward& fwd, ad::Variable x, const DenseTensor& onehot) const;
    void collect(ParamRefs& out);
    void collect_bn(std::vector<BatchNorm*>& out);

    std::size_t out_channels() const noexcept { return out_; }
    Param& kernel() noexcept { return kernel_; }

private:
    std::size_t in_, labels_, out_;
    bool final_;
    Param kernel_;  // [4, 4, 4, out, in + K]
    std::optional<BatchNorm> bn_;
};

/// One-hot rows [N, K] repeated over space as constant channels [N, W, H, L, K].
DenseTensor label_channels(const DenseTensor& onehot, std::size_t w, std::size_t h, std::size_t l);

/// One-hot encoding of class indices, [N, K].
DenseTensor one_hot(const std::vector<std::size_t>& labels, std::size_t classes);

/// Per-core standard deviation so that the product of `factors` Gaussian cores
/// joined by the given interior ranks has element variance `target`.
double tt_core_stddev(double target, std::size_t factors, const std::vector<std::size_t>& interior_ranks);

}  // namespace ttgan
