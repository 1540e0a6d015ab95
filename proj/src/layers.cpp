#include "ttgan/layers.hpp"

#include <cmath>
#include <numeric>
#include <random>

#include "ttgan/errors.hpp"

namespace ttgan {

namespace {

DenseTensor gaussian(Shape shape, double sd, std::mt19937_64& rng) {
    std::normal_distribution<double> nd(0.0, sd);
    DenseTensor t(std::move(shape));
    for (auto& v : t.data()) v = nd(rng);
    return t;
}

std::size_t product(const Shape& s) { return std::accumulate(s.begin(), s.end(), std::size_t{1}, std::multiplies<>()); }

// Applies a TT-matrix given as core variables [r, m_k, n_k, r'] to the rows of x [B, prod n].
// Returns [B, prod m] with output modes in row-major order.
ad::Variable tt_chain_apply(ad::Variable x, const std::vector<ad::Variable>& cores, const Shape& out_modes,
                            const Shape& in_modes) {
    const std::size_t batch = x.shape()[0];
    const std::size_t d = cores.size();
    std::size_t rows = batch;
    std::size_t rest = product(in_modes) / in_modes[0];
    ad::Variable s = ad::reshape(x, {batch, 1, in_modes[0], rest});
    for (std::size_t k = 0; k < d; ++k) {
        const Shape& cs = cores[k].shape();
        const std::size_t r0 = cs[0], m = cs[1], n = cs[2], r1 = cs[3];
        auto p = ad::reshape(ad::permute(s, {0, 3, 1, 2}), {rows * rest, r0 * n});
        auto g = ad::reshape(ad::permute(cores[k], {0, 2, 1, 3}), {r0 * n, m * r1});
        auto y = ad::reshape(ad::matmul(p, g), {rows, rest, m, r1});
        y = ad::permute(y, {0, 2, 3, 1});
        rows *= m;
        if (k + 1 < d) {
            const std::size_t next = in_modes[k + 1];
            s = ad::reshape(y, {rows, r1, next, rest / next});
            rest /= next;
        } else {
            s = y;
        }
    }
    return ad::reshape(s, {batch, product(out_modes)});
}

void check_finite_channels(const ad::Variable& x, std::size_t channels, const char* what) {
    const Shape& s = x.shape();
    if (s.size() != 5 || s[4] != channels) {
        throw ShapeError(std::string(what) + ": expected [N,W,H,L," + std::to_string(channels) + "], got " +
                         shape_to_string(s));
    }
}

}  // namespace

ad::Variable Forward::bind(const Param& p) {
    auto it = bound_.find(&p);
    if (it != bound_.end()) return it->second;
    ad::Variable v = trainable_ ? tape_.parameter(p.value) : tape_.constant(p.value);
    bound_.emplace(&p, v);
    return v;
}

std::vector<DenseTensor> gather_gradients(const Forward& fwd, const ad::Gradients& grads, const ParamRefs& params) {
    std::vector<DenseTensor> out;
    out.reserve(params.size());
    for (const Param* p : params) {
        auto it = fwd.bindings().find(p);
        if (it != fwd.bindings().end()) {
            auto g = grads.find(it->second.id());
            if (g != grads.end()) {
                out.push_back(g->second);
                continue;
            }
        }
        out.emplace_back(p->value.shape());
    }
    return out;
}

double tt_core_stddev(double target, std::size_t factors, const std::vector<std::size_t>& interior_ranks) {
    double paths = 1.0;
    for (auto r : interior_ranks) paths *= static_cast<double>(r);
    return std::sqrt(std::pow(target / paths, 1.0 / static_cast<double>(factors)));
}

DenseTensor one_hot(const std::vector<std::size_t>& labels, std::size_t classes) {
    if (labels.empty()) throw ArgumentError("one_hot: no labels");
    DenseTensor t({labels.size(), classes});
    for (std::size_t i = 0; i < labels.size(); ++i) {
        if (labels[i] >= classes) throw ArgumentError("one_hot: label " + std::to_string(labels[i]) + " out of range");
        t[i * classes + labels[i]] = 1.0;
    }
    return t;
}

DenseTensor label_channels(const DenseTensor& onehot, std::size_t w, std::size_t h, std::size_t l) {
    const std::size_t n = onehot.dim(0), k = onehot.dim(1), p = w * h * l;
    DenseTensor t({n, w, h, l, k});
    for (std::size_t b = 0; b < n; ++b)
        for (std::size_t q = 0; q < p; ++q)
            std::copy_n(onehot.data().data() + b * k, k, t.data().data() + (b * p + q) * k);
    return t;
}

// ---- BatchNorm ---------------------------------------------------------------

BatchNorm::BatchNorm(std::string name, std::size_t channels)
    : running_mean({channels}, 0.0),
      running_var({channels}, 1.0),
      name_(std::move(name)),
      gamma_{name_ + ".gamma", DenseTensor({channels}, 1.0), false},
      beta_{name_ + ".beta", DenseTensor({channels}, 0.0), false} {}

ad::Variable BatchNorm::forward(Forward& fwd, ad::Variable x) const {
    auto g = fwd.bind(gamma_);
    auto b = fwd.bind(beta_);
    if (!fwd.training()) return ad::batch_norm_eval(x, g, b, running_mean, running_var);
    auto y = ad::batch_norm(x, g, b);
    if (fwd.bn_stats) {
        const auto& saved = fwd.tape().saved(y.id());
        auto [it, fresh] = fwd.bn_stats->try_emplace(this);
        if (fresh) {
            it->second.mean_sum = DenseTensor({channels()});
            it->second.var_sum = DenseTensor({channels()});
        }
        for (std::size_t c = 0; c < channels(); ++c) {
            it->second.mean_sum[c] += saved[2][c];
            it->second.var_sum[c] += saved[3][c];
        }
        ++it->second.batches;
    }
    return y;
}

// ---- TTLinear ----------------------------------------------------------------

TTLinear::TTLinear(std::string name, std::size_t in, std::size_t out, std::size_t rank, std::size_t cores,
                   std::uint64_t seed)
    : name_(name), in_(in), out_(out), bias_{name + ".bias", DenseTensor({out}), false} {
    if (in == 0 || out == 0 || rank == 0 || cores == 0) throw ArgumentError("TTLinear: sizes must be positive");
    const auto rows = balanced_factorization(out, cores);
    const auto cols = balanced_factorization(in, cores);
    std::vector<std::size_t> merged(cores);
    for (std::size_t k = 0; k < cores; ++k) merged[k] = rows[k] * cols[k];
    const auto ranks = uniform_rank_chain(merged, rank);
    const double sd = tt_core_stddev(1.0 / static_cast<double>(in), cores,
                                     std::vector<std::size_t>(ranks.begin() + 1, ranks.end() - 1));
    std::mt19937_64 rng(seed);
    for (std::size_t k = 0; k < cores; ++k) {
        cores_.push_back({name + ".core" + std::to_string(k), gaussian({ranks[k], rows[k], cols[k], ranks[k + 1]}, sd, rng),
                          true});
    }
}

void TTLinear::collect(ParamRefs& out) {
    for (auto& c : cores_) out.push_back(&c);
    out.push_back(&bias_);
}

TTMatrix TTLinear::weight() const {
    std::vector<DenseTensor> cs;
    for (const auto& c : cores_) cs.push_back(c.value);
    return TTMatrix(std::move(cs));
}

ad::Variable TTLinear::forward(Forward& fwd, ad::Variable x) const {
    const Shape& s = x.shape();
    if (s.size() != 2 || s[1] != in_) {
        throw ShapeError("TTLinear: expected [N," + std::to_string(in_) + "], got " + shape_to_string(s));
    }
    std::vector<ad::Variable> cores;
    Shape out_modes, in_modes;
    for (const auto& c : cores_) {
        cores.push_back(fwd.bind(c));
        out_modes.push_back(c.value.dim(1));
        in_modes.push_back(c.value.dim(2));
    }
    auto y = tt_chain_apply(x, cores, out_modes, in_modes);
    return ad::add(y, fwd.bind(bias_));
}

// ---- TTConv3d ----------------------------------------------------------------

TTConv3d::TTConv3d(std::string name, std::size_t in_channels, std::size_t out_channels, std::size_t kernel,
                   std::size_t stride, std::size_t pad, std::size_t rank, std::size_t cores, std::uint64_t seed)
    : name_(name), in_(in_channels), out_(out_channels), kernel_(kernel), stride_(stride), pad_(pad) {
    if (in_channels == 0 || out_channels == 0 || kernel == 0 || stride == 0 || rank == 0 || cores == 0) {
        throw ArgumentError("TTConv3d: sizes must be positive");
    }
    in_modes_ = balanced_factorization(in_channels, cores);
    out_modes_ = balanced_factorization(out_channels, cores);
    std::vector<std::size_t> modes{kernel * kernel * kernel};
    for (std::size_t k = 0; k < cores; ++k) modes.push_back(in_modes_[k] * out_modes_[k]);
    const auto ranks = uniform_rank_chain(modes, rank);
    const double fan_in = static_cast<double>(kernel * kernel * kernel * in_channels);
    const double sd = tt_core_stddev(2.0 / fan_in, cores + 1,
                                     std::vector<std::size_t>(ranks.begin() + 1, ranks.end() - 1));
    std::mt19937_64 rng(seed);
    spatial_ = {name + ".g0", gaussian({kernel, kernel, kernel, ranks[1]}, sd, rng), true};
    for (std::size_t k = 0; k < cores; ++k) {
        cores_.push_back({name + ".core" + std::to_string(k + 1),
                          gaussian({ranks[k + 1], in_modes_[k], out_modes_[k], ranks[k + 2]}, sd, rng), true});
    }
}

void TTConv3d::collect(ParamRefs& out) {
    out.push_back(&spatial_);
    for (auto& c : cores_) out.push_back(&c);
}

namespace {

// Kernel [l, l, l, C, S] from bound core variables.
ad::Variable kernel_from_cores(ad::Variable g0, const std::vector<ad::Variable>& cores, std::size_t l, std::size_t C,
                               std::size_t S) {
    const std::size_t d = cores.size();
    const std::size_t r0 = g0.shape()[3];
    Shape merged_shape{r0};
    auto t = ad::reshape(cores[0], {shape_size(cores[0].shape()) / cores[0].shape()[3], cores[0].shape()[3]});
    merged_shape.push_back(cores[0].shape()[1]);
    merged_shape.push_back(cores[0].shape()[2]);
    for (std::size_t k = 1; k < d; ++k) {
        const Shape& cs = cores[k].shape();
        auto prod = ad::matmul(t, ad::reshape(cores[k], {cs[0], cs[1] * cs[2] * cs[3]}));
        t = ad::reshape(prod, {prod.shape()[0] * cs[1] * cs[2], cs[3]});
        merged_shape.push_back(cs[1]);
        merged_shape.push_back(cs[2]);
    }
    // merged_shape: [r0, c1, s1, ..., cd, sd] -> [r0, c1..cd, s1..sd]
    std::vector<std::size_t> axes{0};
    for (std::size_t k = 0; k < d; ++k) axes.push_back(1 + 2 * k);
    for (std::size_t k = 0; k < d; ++k) axes.push_back(2 + 2 * k);
    auto channel = ad::reshape(ad::permute(ad::reshape(t, merged_shape), axes), {r0, C * S});
    auto k = ad::matmul(ad::reshape(g0, {l * l * l, r0}), channel);
    return ad::reshape(k, {l, l, l, C, S});
}

}  // namespace

ad::Variable TTConv3d::forward(Forward& fwd, ad::Variable x, ConvPath path) const {
    check_finite_channels(x, in_, "TTConv3d");
    auto g0 = fwd.bind(spatial_);
    std::vector<ad::Variable> cores;
    for (const auto& c : cores_) cores.push_back(fwd.bind(c));
    if (path == ConvPath::automatic) {
        path = in_ > contraction_threshold ? ConvPath::contraction : ConvPath::materialized;
    }
    if (path == ConvPath::materialized) {
        return ad::conv3d(x, kernel_from_cores(g0, cores, kernel_, in_, out_), stride_, pad_);
    }
    const Shape xs = x.shape();
    const std::size_t n = xs[0], w = xs[1], h = xs[2], l = xs[3];
    const std::size_t r0 = spatial_.value.dim(3);
    // Channel cores as a TT-matrix from C to r0' * S; the spatial rank becomes the leading output mode.
    std::vector<ad::Variable> mat;
    Shape out_modes;
    for (std::size_t k = 0; k < cores.size(); ++k) {
        auto g = ad::permute(cores[k], {0, 2, 1, 3});  // [r, s, c, r']
        const Shape& gs = g.shape();
        if (k == 0) {
            g = ad::reshape(g, {1, gs[0] * gs[1], gs[2], gs[3]});
            out_modes.push_back(gs[0] * gs[1]);
        } else {
            out_modes.push_back(gs[1]);
        }
        mat.push_back(g);
    }
    auto u = tt_chain_apply(ad::reshape(x, {n * w * h * l, in_}), mat, out_modes, in_modes_);
    u = ad::permute(ad::reshape(u, {n, w, h, l, r0, out_}), {0, 5, 1, 2, 3, 4});
    u = ad::reshape(u, {n * out_, w, h, l, r0});
    auto y = ad::conv3d(u, ad::reshape(g0, {kernel_, kernel_, kernel_, r0, 1}), stride_, pad_);
    const Shape ys = y.shape();
    y = ad::reshape(y, {n, out_, ys[1], ys[2], ys[3]});
    return ad::permute(y, {0, 2, 3, 4, 1});
}

DenseTensor TTConv3d::materialize_kernel() const {
    ad::Tape tape;
    std::vector<ad::Variable> cores;
    for (const auto& c : cores_) cores.push_back(tape.constant(c.value));
    return kernel_from_cores(tape.constant(spatial_.value), cores, kernel_, in_, out_).value();
}

TTTensor TTConv3d::as_tt_tensor() const {
    std::vector<DenseTensor> cs;
    const std::size_t l3 = kernel_ * kernel_ * kernel_;
    cs.push_back(reshape(spatial_.value, {1, l3, spatial_.value.dim(3)}));
    for (const auto& c : cores_) {
        const Shape& s = c.value.shape();
        cs.push_back(reshape(c.value, {s[0], s[1] * s[2], s[3]}));
    }
    return TTTensor(std::move(cs));
}

ParamCount TTConv3d::param_count() const { return tt_param_count(as_tt_tensor()); }

// ---- GSPBlock ------------------------------------------------------------------

GSPBlock::GSPBlock(std::string name, std::size_t channels, std::uint64_t seed, std::size_t row_units, double slope)
    : channels_(channels), reduced_(std::max<std::size_t>(1, channels / 6)), units_(row_units), slope_(slope) {
    if (channels < 2) throw ArgumentError("GSPBlock: needs at least 2 channels, got " + std::to_string(channels));
    if (row_units == 0) throw ArgumentError("GSPBlock: row units must be positive");
    std::mt19937_64 rng(seed);
    const double c1 = static_cast<double>(channels), c = static_cast<double>(reduced_);
    reduce_w_ = {name + ".reduce.w", gaussian({channels, reduced_}, 1.0 / std::sqrt(c1), rng), true};
    reduce_b_ = {name + ".reduce.b", DenseTensor({reduced_}), false};
    row_w_ = {name + ".row.w", gaussian({reduced_, units_}, 1.0 / std::sqrt(c), rng), true};
    row_b_ = {name + ".row.b", DenseTensor({units_}), false};
    excite_w_ = {name + ".excite.w",
                 gaussian({reduced_ * units_, channels}, 1.0 / std::sqrt(c * static_cast<double>(units_)), rng), true};
    excite_b_ = {name + ".excite.b", DenseTensor({channels}), false};
}

void GSPBlock::collect(ParamRefs& out) {
    for (Param* p : {&reduce_w_, &reduce_b_, &row_w_, &row_b_, &excite_w_, &excite_b_}) out.push_back(p);
}

ad::Variable GSPBlock::forward(Forward& fwd, ad::Variable x, GspTrace* trace, const DenseTensor* weight_override) const {
    check_finite_channels(x, channels_, "GSPBlock");
    const std::size_t n = x.shape()[0];
    auto z = ad::affine(x, fwd.bind(reduce_w_), fwd.bind(reduce_b_));
    auto cov = ad::covariance_pool(z);
    auto rows = ad::lrelu(ad::affine(ad::row_normalize(cov), fwd.bind(row_w_), fwd.bind(row_b_)), slope_);
    auto flat = ad::reshape(rows, {n, reduced_ * units_});
    ad::Variable s = ad::sigmoid(ad::affine(flat, fwd.bind(excite_w_), fwd.bind(excite_b_)));
    if (weight_override) {
        DenseTensor w({n, channels_});
        if (weight_override->size() == channels_) {
            for (std::size_t b = 0; b < n; ++b)
                std::copy_n(weight_override->data().data(), channels_, w.data().data() + b * channels_);
        } else if (weight_override->size() == n * channels_) {
            w = reshape(*weight_override, {n, channels_});
        } else {
            throw ShapeError("GSPBlock: weight override has shape " + shape_to_string(weight_override->shape()));
        }
        s = fwd.tape().constant(std::move(w));
    }
    if (trace) {
        trace->covariance = cov.value();
        trace->weights = s.value();
    }
    return ad::scale_channels(x, s);
}

// ---- Dense block -----------------------------------------------------------------

DenseUnit::DenseUnit(std::string name, std::size_t in_channels, std::size_t growth, bool bottleneck, std::size_t rank,
                     std::size_t cores, std::uint64_t seed, double slope)
    : slope_(slope),
      bn2_(name + ".bn2", bottleneck ? 4 * growth : in_channels),
      conv2_(name + ".conv2", bottleneck ? 4 * growth : in_channels, growth, 3, 1, 1, rank, cores, seed * 2 + 1) {
    if (bottleneck) {
        bn1_.emplace(name + ".bn1", in_channels);
        conv1_.emplace(name + ".conv1", in_channels, 4 * growth, 1, 1, 0, rank, cores, seed * 2);
    }
}

ad::Variable DenseUnit::forward(Forward& fwd, ad::Variable x) const {
    ad::Variable h = x;
    if (conv1_) h = conv1_->forward(fwd, ad::lrelu(bn1_->forward(fwd, h), slope_));
    return conv2_.forward(fwd, ad::lrelu(bn2_.forward(fwd, h), slope_));
}

void DenseUnit::collect(ParamRefs& out) {
    if (bn1_) {
        bn1_->collect(out);
        conv1_->collect(out);
    }
    bn2_.collect(out);
    conv2_.collect(out);
}

void DenseUnit::collect_bn(std::vector<BatchNorm*>& out) {
    if (bn1_) out.push_back(&*bn1_);
    out.push_back(&bn2_);
}

std::vector<const TTConv3d*> DenseUnit::convs() const {
    std::vector<const TTConv3d*> v;
    if (conv1_) v.push_back(&*conv1_);
    v.push_back(&conv2_);
    return v;
}

std::vector<TTConv3d*> DenseUnit::convs() {
    std::vector<TTConv3d*> v;
    if (conv1_) v.push_back(&*conv1_);
    v.push_back(&conv2_);
    return v;
}

DenseBlock3d::DenseBlock3d(std::string name, std::size_t in_channels, std::size_t layers, std::size_t growth,
                           bool bottleneck, std::size_t rank, std::size_t cores, std::uint64_t seed, double slope)
    : in_(in_channels), growth_(growth) {
    if (growth == 0) throw ArgumentError("DenseBlock3d: growth must be positive");
    const std::size_t per_unit = bottleneck ? 2 : 1;
    if (layers == 0 || layers % per_unit != 0) {
        throw ArgumentError("DenseBlock3d: " + std::to_string(layers) + " layers do not form whole units");
    }
    const std::size_t units = layers / per_unit;
    units_.reserve(units);
    for (std::size_t u = 0; u < units; ++u) {
        units_.emplace_back(name + ".unit" + std::to_string(u), in_channels + u * growth, growth, bottleneck, rank,
                            cores, seed * 131 + u, slope);
    }
}

ad::Variable DenseBlock3d::forward(Forward& fwd, ad::Variable x) const {
    check_finite_channels(x, in_, "DenseBlock3d");
    ad::Variable feats = x;
    for (const auto& unit : units_) feats = ad::concat_channels({feats, unit.forward(fwd, feats)});
    return feats;
}

void DenseBlock3d::collect(ParamRefs& out) {
    for (auto& u : units_) u.collect(out);
}

void DenseBlock3d::collect_bn(std::vector<BatchNorm*>& out) {
    for (auto& u : units_) u.collect_bn(out);
}

// ---- Transition ------------------------------------------------------------------

namespace {

std::size_t reduced_channels(std::size_t in, double reduction) {
    if (!(reduction > 0.0 && reduction <= 1.0)) throw ArgumentError("Transition: reduction must lie in (0,1]");
    return std::max<std::size_t>(1, static_cast<std::size_t>(std::floor(reduction * static_cast<double>(in))));
}

}  // namespace

Transition::Transition(std::string name, std::size_t in_channels, double reduction, std::size_t rank,
                       std::size_t cores, std::uint64_t seed, double slope)
    : slope_(slope),
      bn_(name + ".bn", in_channels),
      conv_(name + ".conv", in_channels, reduced_channels(in_channels, reduction), 1, 1, 0, rank, cores, seed) {}

ad::Variable Transition::forward(Forward& fwd, ad::Variable x) const {
    auto h = conv_.forward(fwd, ad::lrelu(bn_.forward(fwd, x), slope_));
    return ad::average_pool3d(h, 2);
}

void Transition::collect(ParamRefs& out) {
    bn_.collect(out);
    conv_.collect(out);
}

// ---- Generator stage -------------------------------------------------------------

GeneratorStage::GeneratorStage(std::string name, std::size_t in_channels, std::size_t label_channels,
                               std::size_t out_channels, bool final_stage, std::uint64_t seed)
    : in_(in_channels), labels_(label_channels), out_(out_channels), final_(final_stage) {
    std::mt19937_64 rng(seed);
    const double fan_in = static_cast<double>((in_channels + label_channels) * 8);
    kernel_ = {name + ".kernel", gaussian({4, 4, 4, out_channels, in_channels + label_channels},
                                          1.0 / std::sqrt(fan_in), rng),
               true};
    if (!final_stage) bn_.emplace(name + ".bn", out_channels);
}

ad::Variable GeneratorStage::forward(Forward& fwd, ad::Variable x, const DenseTensor& onehot) const {
    check_finite_channels(x, in_, "GeneratorStage");
    const Shape& s = x.shape();
    if (onehot.rank() != 2 || onehot.dim(0) != s[0] || onehot.dim(1) != labels_) {
        throw ShapeError("GeneratorStage: label block has shape " + shape_to_string(onehot.shape()));
    }
    auto labels = fwd.tape().constant(label_channels(onehot, s[1], s[2], s[3]));
    auto y = ad::transposed_conv3d(ad::concat_channels({x, labels}), fwd.bind(kernel_), 2, 1);
    if (final_) return ad::tanh(y);
    return ad::lrelu(bn_->forward(fwd, y), 0.0);
}

void GeneratorStage::collect(ParamRefs& out) {
    out.push_back(&kernel_);
    if (bn_) bn_->collect(out);
}

void GeneratorStage::collect_bn(std::vector<BatchNorm*>& out) {
    if (bn_) out.push_back(&*bn_);
}

}  // namespace ttgan
