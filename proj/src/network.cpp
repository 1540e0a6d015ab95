#include "ttgan/network.hpp"

#include <cmath>
#include <random>
#include <set>

#include "ttgan/errors.hpp"

namespace ttgan {

namespace {

// Mean over the spatial axes: [N, W, H, L, C] -> [N, C].
ad::Variable global_average_pool(ad::Tape& tape, ad::Variable x) {
    const Shape s = x.shape();
    const std::size_t n = s[0], p = s[1] * s[2] * s[3], c = s[4];
    auto rows = ad::reshape(ad::permute(ad::reshape(x, {n, p, c}), {0, 2, 1}), {n * c, p});
    auto avg = tape.constant(DenseTensor({p, 1}, 1.0 / static_cast<double>(p)));
    return ad::reshape(ad::matmul(rows, avg), {n, c});
}

}  // namespace

std::size_t layers_per_block(const DenseNetConfig& c) {
    if (c.blocks == 0) throw ConfigError("blocks must be positive");
    if (c.depth < 4 + c.blocks) throw ConfigError("depth " + std::to_string(c.depth) + " too small for " +
                                                   std::to_string(c.blocks) + " blocks");
    return (c.depth - 4) / c.blocks;
}

std::string_view layer_kind_name(LayerKind k) {
    switch (k) {
        case LayerKind::tt_conv: return "tt_conv";
        case LayerKind::batch_norm: return "batch_norm";
        case LayerKind::dense_block: return "dense_block";
        case LayerKind::gsp: return "gsp";
        case LayerKind::transition: return "transition";
        case LayerKind::average_pool: return "average_pool";
        case LayerKind::global_pool: return "global_pool";
        case LayerKind::tt_linear: return "tt_linear";
        case LayerKind::softmax: return "softmax";
        case LayerKind::sigmoid: return "sigmoid";
    }
    return "unknown";
}

DenseNet3d::DenseNet3d(std::string name, const DenseNetConfig& config) : name_(std::move(name)), config_(config) {
    const std::size_t layers = layers_per_block(config);
    if (config.bottleneck && layers % 2 != 0) {
        throw ConfigError("depth " + std::to_string(config.depth) + " gives " + std::to_string(layers) +
                          " layers per block, which do not pair into bottleneck units");
    }
    if (config.gsp_position > config.blocks) {
        throw ConfigError("gsp_position " + std::to_string(config.gsp_position) + " outside 1.." +
                          std::to_string(config.blocks));
    }
    if (config.growth == 0 || config.outputs == 0 || config.in_channels == 0) {
        throw ConfigError("growth, outputs and input channels must be positive");
    }
    std::uint64_t seed = config.seed * 1000003;
    auto conv_desc = [&](const TTConv3d& c) {
        description_.push_back(
            {LayerKind::tt_conv, c.name(), c.in_channels(), c.out_channels(), &c, nullptr, nullptr, nullptr});
    };
    auto bn_desc = [&](const BatchNorm& b) {
        description_.push_back({LayerKind::batch_norm, b.name(), b.channels(), b.channels(), nullptr, nullptr, &b, nullptr});
    };

    std::size_t channels = 2 * config.growth;
    stem_ = std::make_unique<TTConv3d>(name_ + ".stem", config.in_channels, channels, 3, 1, 1, config.rank,
                                       config.tt_cores, seed++);
    conv_desc(*stem_);

    for (std::size_t b = 0; b < config.blocks; ++b) {
        const std::string bname = name_ + ".block" + std::to_string(b + 1);
        blocks_.push_back(std::make_unique<DenseBlock3d>(bname, channels, layers, config.growth, config.bottleneck,
                                                         config.rank, config.tt_cores, seed++, config.slope));
        const auto& block = *blocks_.back();
        description_.push_back({LayerKind::dense_block, bname, channels, block.out_channels()});
        for (auto& unit : blocks_.back()->units()) {
            std::vector<BatchNorm*> bns;
            unit.collect_bn(bns);
            const auto convs = unit.convs();
            for (std::size_t i = 0; i < convs.size(); ++i) {
                bn_desc(*bns[i]);
                conv_desc(*convs[i]);
            }
        }
        channels = block.out_channels();

        if (config.gsp_position == b + 1) {
            gsp_.emplace(name_ + ".gsp", channels, seed++, 4, config.slope);
            description_.push_back({LayerKind::gsp, name_ + ".gsp", channels, channels, nullptr, nullptr, nullptr,
                                    &*gsp_});
        }

        const std::string tname = name_ + ".transition" + std::to_string(b + 1);
        transitions_.push_back(
            std::make_unique<Transition>(tname, channels, config.reduction, config.rank, config.tt_cores, seed++,
                                         config.slope));
        auto& tr = *transitions_.back();
        description_.push_back({LayerKind::transition, tname, channels, tr.out_channels()});
        std::vector<BatchNorm*> tbn;
        tr.collect_bn(tbn);
        bn_desc(*tbn[0]);
        conv_desc(tr.conv());
        description_.push_back({LayerKind::average_pool, tname + ".pool", tr.out_channels(), tr.out_channels()});
        channels = tr.out_channels();
    }

    description_.push_back({LayerKind::global_pool, name_ + ".global_pool", channels, channels});
    head_ = std::make_unique<TTLinear>(name_ + ".head", channels, config.outputs, config.rank, config.tt_cores, seed++);
    description_.push_back({LayerKind::tt_linear, name_ + ".head", channels, config.outputs, nullptr, head_.get()});
    description_.push_back({config.outputs == 1 ? LayerKind::sigmoid : LayerKind::softmax, name_ + ".output",
                            config.outputs, config.outputs});

    stem_->contraction_threshold = config.contraction_threshold;
    stem_->collect(params_);
    for (std::size_t b = 0; b < config.blocks; ++b) {
        for (auto& unit : blocks_[b]->units())
            for (auto* c : unit.convs()) c->contraction_threshold = config.contraction_threshold;
        blocks_[b]->collect(params_);
        blocks_[b]->collect_bn(bns_);
        if (gsp_ && config.gsp_position == b + 1) gsp_->collect(params_);
        transitions_[b]->conv().contraction_threshold = config.contraction_threshold;
        transitions_[b]->collect(params_);
        transitions_[b]->collect_bn(bns_);
    }
    head_->collect(params_);
}

ad::Variable DenseNet3d::forward(Forward& fwd, ad::Variable x) const {
    auto h = stem_->forward(fwd, x);
    for (std::size_t b = 0; b < blocks_.size(); ++b) {
        h = blocks_[b]->forward(fwd, h);
        if (gsp_ && config_.gsp_position == b + 1) h = gsp_->forward(fwd, h);
        h = transitions_[b]->forward(fwd, h);
    }
    return head_->forward(fwd, global_average_pool(fwd.tape(), h));
}

NetworkParamCount DenseNet3d::param_count() const {
    NetworkParamCount out;
    std::set<const Param*> tt_cores;
    for (const auto& d : description_) {
        if (d.conv) {
            const auto pc = d.conv->param_count();
            out.tt_params += pc.tt_params;
            out.dense_params += pc.dense_params;
            tt_cores.insert(&d.conv->spatial_core());
            for (const auto& c : d.conv->channel_cores()) tt_cores.insert(&c);
        }
        if (d.linear) {
            const auto pc = d.linear->param_count();
            out.tt_params += pc.tt_params;
            out.dense_params += pc.dense_params;
            for (const auto& c : const_cast<TTLinear*>(d.linear)->cores()) tt_cores.insert(&c);
        }
    }
    for (const Param* p : params_) {
        if (tt_cores.count(p)) continue;
        out.tt_params += p->value.size();
        out.dense_params += p->value.size();
    }
    out.ratio = static_cast<double>(out.dense_params) / static_cast<double>(out.tt_params);
    return out;
}

std::unique_ptr<DenseNet3d> classifier_assemble(const DenseNetConfig& config) {
    if (config.gsp_position < 1 || config.gsp_position > 3 || config.gsp_position > config.blocks) {
        throw ConfigError("gsp_position must be 1, 2 or 3 (got " + std::to_string(config.gsp_position) + ")");
    }
    return std::make_unique<DenseNet3d>("classifier", config);
}

// ---- Generator -------------------------------------------------------------------

Generator::Generator(const GeneratorConfig& config) : config_(config) {
    if (config.extent == 0 || config.extent % 8 != 0) {
        throw ConfigError("generator output extent must be a positive multiple of 8 (got " +
                          std::to_string(config.extent) + ")");
    }
    if (config.latent_dim == 0 || config.classes == 0 || config.base_channels < 4) {
        throw ConfigError("generator needs latent_dim >= 1, classes >= 1, base_channels >= 4");
    }
    base_ = config.extent / 8;
    const std::size_t c0 = config.base_channels;
    const std::size_t cells = base_ * base_ * base_;
    std::mt19937_64 rng(config.seed * 7919 + 17);
    std::normal_distribution<double> nd(0.0, 1.0 / std::sqrt(static_cast<double>(config.latent_dim)));
    proj_w_ = {"generator.proj.w", DenseTensor({config.latent_dim, cells * c0}), true};
    for (auto& v : proj_w_.value.data()) v = nd(rng);
    proj_b_ = {"generator.proj.b", DenseTensor({cells * c0}), false};
    proj_bn_ = std::make_unique<BatchNorm>("generator.proj.bn", c0);
    const std::size_t widths[4] = {c0, c0 / 2, c0 / 4, 1};
    for (std::size_t s = 0; s < 3; ++s) {
        stages_.push_back(std::make_unique<GeneratorStage>("generator.stage" + std::to_string(s + 1), widths[s],
                                                           config.classes, widths[s + 1], s == 2,
                                                           config.seed * 31 + s));
    }
    bns_.push_back(proj_bn_.get());
    params_.push_back(&proj_w_);
    params_.push_back(&proj_b_);
    proj_bn_->collect(params_);
    for (auto& st : stages_) {
        st->collect(params_);
        st->collect_bn(bns_);
    }
}

ad::Variable Generator::forward(Forward& fwd, ad::Variable z, const DenseTensor& onehot) const {
    const Shape& zs = z.shape();
    if (zs.size() != 2 || zs[1] != config_.latent_dim) {
        throw ShapeError("Generator: expected z [N," + std::to_string(config_.latent_dim) + "], got " +
                         shape_to_string(zs));
    }
    const std::size_t n = zs[0];
    auto h = ad::affine(z, fwd.bind(proj_w_), fwd.bind(proj_b_));
    h = ad::reshape(h, {n, base_, base_, base_, config_.base_channels});
    h = ad::lrelu(proj_bn_->forward(fwd, h), 0.0);
    for (const auto& st : stages_) h = st->forward(fwd, h, onehot);
    return h;
}

}  // namespace ttgan
