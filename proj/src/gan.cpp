#include "ttgan/gan.hpp"

#include <fmt/format.h>

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>
#include <sstream>
#include <utility>

#include "ttgan/errors.hpp"
#include "ttgan/metrics.hpp"

namespace ttgan {

namespace {

std::uint64_t mix_seed(std::initializer_list<std::uint64_t> parts) {
    std::vector<std::uint32_t> words;
    for (auto p : parts) {
        words.push_back(static_cast<std::uint32_t>(p));
        words.push_back(static_cast<std::uint32_t>(p >> 32));
    }
    std::seed_seq seq(words.begin(), words.end());
    std::array<std::uint32_t, 2> out{};
    seq.generate(out.begin(), out.end());
    return (static_cast<std::uint64_t>(out[0]) << 32) | out[1];
}

double clamp_prob(double p) { return std::clamp(p, kProbClamp, 1.0 - kProbClamp); }

double mean_of(std::span<const double> v, const std::function<double(double)>& f) {
    double s = 0.0;
    for (double x : v) s += f(x);
    return s / static_cast<double>(v.size());
}

void check_distribution_rows(const DenseTensor& p, const char* what) {
    if (p.rank() != 2) throw ShapeError(std::string(what) + ": probabilities must be [N,K]");
    const std::size_t n = p.dim(0), k = p.dim(1);
    for (std::size_t i = 0; i < n; ++i) {
        double s = 0.0;
        for (std::size_t j = 0; j < k; ++j) s += p[i * k + j];
        if (std::abs(s - 1.0) > 1e-6) {
            throw ArgumentError(std::string(what) + ": row " + std::to_string(i) + " sums to " + std::to_string(s));
        }
    }
}

double mean_cross_entropy(const DenseTensor& p, std::span<const std::size_t> labels, const char* what) {
    if (p.dim(0) != labels.size()) throw ShapeError(std::string(what) + ": label count mismatch");
    const std::size_t k = p.dim(1);
    double s = 0.0;
    for (std::size_t i = 0; i < labels.size(); ++i) {
        if (labels[i] >= k) throw ArgumentError(std::string(what) + ": label " + std::to_string(labels[i]) +
                                                " out of range");
        s -= std::log(clamp_prob(p[i * k + labels[i]]));
    }
    return s / static_cast<double>(labels.size());
}

// Concatenates tensors along the leading axis.
DenseTensor concat_batch(const std::vector<const DenseTensor*>& xs) {
    Shape shape = xs.front()->shape();
    std::size_t n = 0;
    for (const auto* x : xs) {
        if (!std::equal(shape.begin() + 1, shape.end(), x->shape().begin() + 1) || x->rank() != shape.size()) {
            throw ShapeError("concat_batch: " + shape_to_string(shape) + " vs " + shape_to_string(x->shape()));
        }
        n += x->dim(0);
    }
    shape[0] = n;
    std::vector<double> data;
    data.reserve(shape_size(shape));
    for (const auto* x : xs) data.insert(data.end(), x->data().begin(), x->data().end());
    return DenseTensor(shape, std::move(data));
}

ad::Variable concat_batch(const std::vector<ad::Variable>& xs) {
    Shape shape = xs.front().shape();
    std::vector<ad::Variable> flat;
    std::size_t n = 0;
    for (const auto& x : xs) {
        n += x.shape()[0];
        flat.push_back(ad::reshape(x, {1, shape_size(x.shape())}));
    }
    shape[0] = n;
    return ad::reshape(ad::concat_channels(flat), shape);
}

// Volume [N, e, e, e, 1] with one-hot label channels appended.
DenseTensor labeled_pair(const DenseTensor& x, const std::vector<std::size_t>& y, std::size_t classes) {
    const auto lc = label_channels(one_hot(y, classes), x.dim(1), x.dim(2), x.dim(3));
    ad::Tape tape;
    return ad::concat_channels({tape.constant(x), tape.constant(lc)}).value();
}

bool all_finite(const ParamRefs& ps) {
    for (const Param* p : ps)
        for (double v : p->value.data())
            if (!std::isfinite(v)) return false;
    return true;
}

double norm_of(const std::vector<DenseTensor>& gs) {
    double s = 0.0;
    for (const auto& g : gs)
        for (double v : g.data()) s += v * v;
    return std::sqrt(s);
}

DenseTensor column_weights(std::size_t total, std::size_t begin, std::size_t end, double weight) {
    DenseTensor w({total, 1});
    for (std::size_t i = begin; i < end; ++i) w[i] = weight;
    return w;
}

ad::Variable log_prob(ad::Variable d) { return ad::clamped_log(d, kProbClamp, 1.0 - kProbClamp); }
ad::Variable log_one_minus(ad::Variable d) { return log_prob(ad::scale(d, -1.0, 1.0)); }

// ---- config schema -----------------------------------------------------------------------

template <class T>
T parse_number(const std::string& key, const std::string& v);

template <>
double parse_number<double>(const std::string& key, const std::string& v) {
    std::size_t used = 0;
    double d = 0.0;
    try {
        d = std::stod(v, &used);
    } catch (const std::exception&) {
        used = 0;
    }
    if (used == 0 || used != v.size() || !std::isfinite(d)) throw ConfigError(key + ": not a number: '" + v + "'");
    return d;
}

template <>
std::size_t parse_number<std::size_t>(const std::string& key, const std::string& v) {
    if (v.empty() || v.find_first_not_of("0123456789") != std::string::npos || v.size() > 19) {
        throw ConfigError(key + ": not a non-negative integer: '" + v + "'");
    }
    return static_cast<std::size_t>(std::stoull(v));
}

template <class T>
std::vector<T> parse_list(const std::string& key, const std::string& v) {
    std::vector<T> out;
    if (v.empty()) return out;
    std::stringstream ss(v);
    std::string item;
    while (std::getline(ss, item, ',')) out.push_back(parse_number<T>(key, item));
    return out;
}

template <class T>
std::string join(const std::vector<T>& v) {
    std::string out;
    for (std::size_t i = 0; i < v.size(); ++i) out += (i ? "," : "") + fmt::format("{}", v[i]);
    return out;
}

struct KeySpec {
    const char* key;
    std::function<void(GanConfig&, const std::string&)> set;
    std::function<std::string(const GanConfig&)> get;
};

#define TTGAN_REAL(field) \
    KeySpec{#field, [](GanConfig& c, const std::string& v) { c.field = parse_number<double>(#field, v); }, \
            [](const GanConfig& c) { return fmt::format("{}", c.field); }}
#define TTGAN_COUNT(field) \
    KeySpec{#field, [](GanConfig& c, const std::string& v) { c.field = parse_number<std::size_t>(#field, v); }, \
            [](const GanConfig& c) { return fmt::format("{}", c.field); }}

const std::vector<KeySpec>& key_specs() {
    static const std::vector<KeySpec> specs{
        TTGAN_REAL(alpha),
        TTGAN_REAL(alpha_p),
        TTGAN_REAL(lambda_l1),
        TTGAN_REAL(lr),
        KeySpec{"lr_milestones",
                [](GanConfig& c, const std::string& v) { c.lr_milestones = parse_list<std::size_t>("lr_milestones", v); },
                [](const GanConfig& c) { return join(c.lr_milestones); }},
        KeySpec{"lr_factors",
                [](GanConfig& c, const std::string& v) { c.lr_factors = parse_list<double>("lr_factors", v); },
                [](const GanConfig& c) { return join(c.lr_factors); }},
        TTGAN_REAL(momentum),
        TTGAN_REAL(weight_decay),
        TTGAN_COUNT(batch_size),
        TTGAN_COUNT(epochs),
        TTGAN_COUNT(schedule_epochs),
        TTGAN_COUNT(rp_start_epoch),
        TTGAN_COUNT(latent_dim),
        TTGAN_COUNT(class_count),
        TTGAN_COUNT(gsp_position),
        TTGAN_COUNT(c_rank),
        TTGAN_COUNT(d_rank),
        TTGAN_COUNT(tt_core_count),
        TTGAN_COUNT(seed),
        TTGAN_COUNT(volume_extent),
        TTGAN_COUNT(c_depth),
        TTGAN_COUNT(c_growth),
        TTGAN_COUNT(d_depth),
        TTGAN_COUNT(d_growth),
        TTGAN_COUNT(g_channels),
        TTGAN_REAL(slope),
        TTGAN_COUNT(contraction_threshold),
    };
    return specs;
}

#undef TTGAN_REAL
#undef TTGAN_COUNT

}  // namespace

// ---- config ---------------------------------------------------------------------------

void GanConfig::validate() const {
    std::vector<std::string> bad;
    if (!(alpha > 0.0 && alpha < 1.0)) bad.push_back("alpha must be in (0,1)");
    if (!(alpha_p >= 0.0)) bad.push_back("alpha_p must be >= 0");
    if (!(lambda_l1 >= 0.0)) bad.push_back("lambda_l1 must be >= 0");
    if (!(lr >= 0.0)) bad.push_back("lr must be >= 0");
    if (lr_milestones.size() != lr_factors.size()) bad.push_back("lr_milestones and lr_factors differ in length");
    if (!std::is_sorted(lr_milestones.begin(), lr_milestones.end())) bad.push_back("lr_milestones must be ascending");
    for (double f : lr_factors)
        if (!(f > 0.0)) bad.push_back("lr_factors must be positive");
    if (!(momentum >= 0.0 && momentum < 1.0)) bad.push_back("momentum must be in [0,1)");
    if (!(weight_decay >= 0.0)) bad.push_back("weight_decay must be >= 0");
    if (batch_size == 0) bad.push_back("batch_size must be positive");
    if (schedule_epochs == 0) bad.push_back("schedule_epochs must be positive");
    if (rp_start_epoch > schedule_epochs) bad.push_back("rp_start_epoch must not exceed schedule_epochs");
    if (latent_dim == 0) bad.push_back("latent_dim must be positive");
    if (class_count < 2) bad.push_back("class_count must be at least 2");
    if (gsp_position < 1 || gsp_position > 3) bad.push_back("gsp_position must be 1, 2 or 3");
    if (c_rank == 0 || d_rank == 0) bad.push_back("c_rank and d_rank must be positive");
    if (tt_core_count == 0) bad.push_back("tt_core_count must be positive");
    if (volume_extent == 0 || volume_extent % 8 != 0) bad.push_back("volume_extent must be a positive multiple of 8");
    if (g_channels < 4 || g_channels % 4 != 0) bad.push_back("g_channels must be a positive multiple of 4");
    if (c_growth == 0 || d_growth == 0) bad.push_back("c_growth and d_growth must be positive");
    if (!(slope >= 0.0 && slope < 1.0)) bad.push_back("slope must be in [0,1)");
    for (auto [key, depth] : {std::pair{"c_depth", c_depth}, std::pair{"d_depth", d_depth}}) {
        if (depth < 7 || ((depth - 4) / 3) % 2 != 0) {
            bad.push_back(std::string(key) + " must give an even, non-zero layer count per block");
        }
    }
    if (!bad.empty()) {
        std::string msg = "invalid configuration:";
        for (const auto& b : bad) msg += "\n  " + b;
        throw ConfigError(msg);
    }
}

GanConfig smoke_config() {
    GanConfig c;
    c.epochs = 20;
    c.c_depth = 10;
    c.c_growth = 6;
    c.d_depth = 10;
    c.d_growth = 4;
    c.g_channels = 16;
    return c;
}

void set_config_key(GanConfig& c, const std::string& key, const std::string& value) {
    for (const auto& s : key_specs()) {
        if (key == s.key) {
            s.set(c, value);
            return;
        }
    }
    throw ConfigError("unknown configuration key '" + key + "'");
}

std::vector<std::string> config_keys() {
    std::vector<std::string> out;
    for (const auto& s : key_specs()) out.emplace_back(s.key);
    return out;
}

std::string config_to_text(const GanConfig& c) {
    std::string out;
    for (const auto& s : key_specs()) out += std::string(s.key) + "=" + s.get(c) + "\n";
    return out;
}

GanConfig config_from_text(const std::string& text) {
    GanConfig c;
    std::istringstream in(text);
    std::string line;
    while (std::getline(in, line)) {
        if (line.empty()) continue;
        const auto eq = line.find('=');
        if (eq == std::string::npos) throw ConfigError("configuration line without '=': " + line);
        set_config_key(c, line.substr(0, eq), line.substr(eq + 1));
    }
    return c;
}

std::size_t scaled_epoch(const GanConfig& c, std::size_t v) { return v * c.epochs / c.schedule_epochs; }

std::size_t rp_start(const GanConfig& c) { return scaled_epoch(c, c.rp_start_epoch); }

double learning_rate(const GanConfig& c, std::size_t epoch) {
    double lr = c.lr;
    for (std::size_t i = 0; i < c.lr_milestones.size(); ++i)
        if (epoch >= scaled_epoch(c, c.lr_milestones[i])) lr *= c.lr_factors[i];
    return lr;
}

DenseNetConfig classifier_net_config(const GanConfig& c) {
    DenseNetConfig d;
    d.in_channels = 1;
    d.outputs = c.class_count;
    d.depth = c.c_depth;
    d.growth = c.c_growth;
    d.gsp_position = c.gsp_position;
    d.rank = c.c_rank;
    d.tt_cores = c.tt_core_count;
    d.slope = c.slope;
    d.contraction_threshold = c.contraction_threshold;
    d.seed = mix_seed({c.seed, 1});
    return d;
}

DenseNetConfig discriminator_net_config(const GanConfig& c) {
    DenseNetConfig d;
    d.in_channels = 1 + c.class_count;
    d.outputs = 1;
    d.depth = c.d_depth;
    d.growth = c.d_growth;
    d.gsp_position = 0;
    d.rank = c.d_rank;
    d.tt_cores = c.tt_core_count;
    d.slope = c.slope;
    d.contraction_threshold = c.contraction_threshold;
    d.seed = mix_seed({c.seed, 2});
    return d;
}

GeneratorConfig generator_net_config(const GanConfig& c) {
    GeneratorConfig g;
    g.latent_dim = c.latent_dim;
    g.classes = c.class_count;
    g.extent = c.volume_extent;
    g.base_channels = c.g_channels;
    g.seed = mix_seed({c.seed, 3});
    return g;
}

// ---- losses -------------------------------------------------------------------------------

double discriminator_loss(std::span<const double> d_real, std::span<const double> d_c, std::span<const double> d_g,
                          double alpha) {
    if (d_real.empty() || d_c.empty() || d_g.empty()) throw ArgumentError("discriminator_loss: empty batch");
    const double real = mean_of(d_real, [](double d) { return std::log(clamp_prob(d)); });
    const double cls = mean_of(d_c, [](double d) { return std::log(1.0 - clamp_prob(d)); });
    const double gen = mean_of(d_g, [](double d) { return std::log(1.0 - clamp_prob(d)); });
    return -(real + alpha * cls + (1.0 - alpha) * gen);
}

double discriminator_objective(std::span<const double> p_real, std::span<const double> p_c,
                               std::span<const double> p_g, std::span<const double> d, double alpha) {
    const std::size_t n = d.size();
    if (p_real.size() != n || p_c.size() != n || p_g.size() != n || n == 0) {
        throw ArgumentError("discriminator_objective: distributions and outputs must share one support");
    }
    double u = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
        const double dd = clamp_prob(d[i]);
        u += p_real[i] * std::log(dd) + (alpha * p_c[i] + (1.0 - alpha) * p_g[i]) * std::log(1.0 - dd);
    }
    return -u;
}

ClassifierLoss classifier_loss(const DenseTensor& probs_labeled, std::span<const std::size_t> labels,
                               const DenseTensor& probs_generated, std::span<const std::size_t> gen_labels,
                               std::span<const double> d_out_c, double alpha_p, std::size_t epoch,
                               std::size_t rp_start_epoch) {
    if (labels.empty()) throw ArgumentError("classifier_loss: empty labeled batch");
    check_distribution_rows(probs_labeled, "classifier_loss");
    ClassifierLoss out;
    out.r_l = mean_cross_entropy(probs_labeled, labels, "classifier_loss");
    if (epoch >= rp_start_epoch && !gen_labels.empty()) {
        check_distribution_rows(probs_generated, "classifier_loss");
        out.r_p = mean_cross_entropy(probs_generated, gen_labels, "classifier_loss");
    }
    if (!d_out_c.empty()) out.unsup = mean_of(d_out_c, [](double d) { return std::log(1.0 - clamp_prob(d)); });
    out.total = out.r_l + alpha_p * out.r_p + out.unsup;
    return out;
}

double generator_loss(std::span<const double> d_g, const DenseTensor& x_g, const DenseTensor& x_real, double lambda) {
    if (x_g.shape() != x_real.shape()) {
        throw ShapeError("generator_loss: " + shape_to_string(x_g.shape()) + " vs " + shape_to_string(x_real.shape()));
    }
    if (d_g.empty()) throw ArgumentError("generator_loss: empty batch");
    const double adv = mean_of(d_g, [](double d) { return std::log(1.0 - clamp_prob(d)); });
    double l1 = 0.0;
    for (std::size_t i = 0; i < x_g.size(); ++i) l1 += std::abs(x_g[i] - x_real[i]);
    if (x_g.size() > 0) l1 /= static_cast<double>(x_g.size());
    return adv + lambda * l1;
}

// ---- state -----------------------------------------------------------------------------------

ThreePlayerState::ThreePlayerState(const GanConfig& config) : config_(config) {
    config_.validate();
    classifier_ = classifier_assemble(classifier_net_config(config_));
    discriminator_ = std::make_unique<DenseNet3d>("discriminator", discriminator_net_config(config_));
    generator_ = std::make_unique<Generator>(generator_net_config(config_));
    for (const Param* p : classifier_->params()) c_velocity_.emplace_back(p->value.shape());
    for (const Param* p : discriminator_->params()) d_velocity_.emplace_back(p->value.shape());
    for (const Param* p : generator_->params()) g_velocity_.emplace_back(p->value.shape());
}

ParamRefs& ThreePlayerState::params(std::string_view player) {
    if (player == "classifier") return classifier_->params();
    if (player == "discriminator") return discriminator_->params();
    if (player == "generator") return generator_->params();
    throw ArgumentError("unknown player '" + std::string(player) + "'");
}

std::vector<DenseTensor>& ThreePlayerState::velocity(std::string_view player) {
    if (player == "classifier") return c_velocity_;
    if (player == "discriminator") return d_velocity_;
    if (player == "generator") return g_velocity_;
    throw ArgumentError("unknown player '" + std::string(player) + "'");
}

std::vector<BatchNorm*> ThreePlayerState::batch_norms() {
    std::vector<BatchNorm*> out = classifier_->batch_norms();
    out.insert(out.end(), discriminator_->batch_norms().begin(), discriminator_->batch_norms().end());
    out.insert(out.end(), generator_->batch_norms().begin(), generator_->batch_norms().end());
    return out;
}

StateSnapshot snapshot(ThreePlayerState& s) {
    StateSnapshot snap;
    for (const char* player : {"classifier", "discriminator", "generator"}) {
        for (const Param* p : s.params(player)) snap.values.push_back(p->value);
        for (const auto& v : s.velocity(player)) snap.values.push_back(v);
    }
    for (const BatchNorm* bn : s.batch_norms()) {
        snap.values.push_back(bn->running_mean);
        snap.values.push_back(bn->running_var);
    }
    snap.epoch = s.epoch;
    snap.counters = s.counters;
    return snap;
}

void restore(ThreePlayerState& s, const StateSnapshot& snap) {
    std::size_t i = 0;
    auto next = [&]() -> const DenseTensor& {
        if (i >= snap.values.size()) throw ContractError("restore: snapshot does not match the state");
        return snap.values[i++];
    };
    for (const char* player : {"classifier", "discriminator", "generator"}) {
        for (Param* p : s.params(player)) p->value = next();
        for (auto& v : s.velocity(player)) v = next();
    }
    for (BatchNorm* bn : s.batch_norms()) {
        bn->running_mean = next();
        bn->running_var = next();
    }
    if (i != snap.values.size()) throw ContractError("restore: snapshot does not match the state");
    s.epoch = snap.epoch;
    s.counters = snap.counters;
}

void nesterov_update(ParamRefs& params, const std::vector<DenseTensor>& grads, std::vector<DenseTensor>& velocity,
                     double lr, double momentum, double weight_decay) {
    if (grads.size() != params.size() || velocity.size() != params.size()) {
        throw ContractError("nesterov_update: parameter, gradient and velocity counts differ");
    }
    for (std::size_t k = 0; k < params.size(); ++k) {
        auto w = params[k]->value.data();
        auto v = velocity[k].data();
        const auto g = grads[k].data();
        const double wd = params[k]->decay ? weight_decay : 0.0;
        for (std::size_t i = 0; i < w.size(); ++i) {
            const double gi = g[i] + wd * w[i];
            v[i] = momentum * v[i] - lr * gi;
            w[i] += momentum * v[i] - lr * gi;
        }
    }
}

// ---- one step ------------------------------------------------------------------------------------

StepBatch prepare_step(ThreePlayerState& s, const DenseTensor& x_l, const std::vector<std::size_t>& y_l,
                       const DenseTensor& x_u, std::uint64_t seed) {
    const GanConfig& cfg = s.config();
    if (y_l.empty() || x_l.rank() != 5 || x_l.dim(0) != y_l.size()) {
        throw ArgumentError("train step: labeled batch must be non-empty with one label per volume");
    }
    if (x_u.rank() != 5 || x_u.dim(0) == 0) throw ArgumentError("train step: unlabeled batch must be non-empty");
    for (auto y : y_l)
        if (y >= cfg.class_count) throw ArgumentError("train step: label " + std::to_string(y) + " out of range");

    std::mt19937_64 rng(seed);
    std::uniform_real_distribution<double> unit(0.0, 1.0);
    StepBatch b;
    b.x_l = x_l;
    b.y_l = y_l;
    b.x_u = x_u;

    try {
        ad::Tape tape;
        Forward f(tape, true, false);
        const auto probs = ad::softmax_rows(s.classifier().forward(f, tape.constant(x_u)).value());
        const std::size_t k = probs.dim(1);
        for (std::size_t i = 0; i < probs.dim(0); ++i) {
            const double u = unit(rng);
            double acc = 0.0;
            std::size_t pick = k - 1;
            for (std::size_t j = 0; j < k; ++j) {
                acc += probs[i * k + j];
                if (u < acc) {
                    pick = j;
                    break;
                }
            }
            b.y_c.push_back(pick);
        }
    } catch (const NumericError& e) {
        throw StepError("classifier", e.what());
    }

    const std::size_t n = y_l.size();
    b.z = DenseTensor({n, cfg.latent_dim});
    std::uniform_real_distribution<double> sym(-1.0, 1.0);
    for (auto& v : b.z.data()) v = sym(rng);
    b.y_g = y_l;
    std::shuffle(b.y_g.begin(), b.y_g.end(), rng);

    const std::size_t voxels = x_l.size() / n;
    b.x_pair = DenseTensor(x_l.shape());
    for (std::size_t i = 0; i < n; ++i) {
        std::vector<std::size_t> same;
        for (std::size_t j = 0; j < n; ++j)
            if (y_l[j] == b.y_g[i]) same.push_back(j);
        const std::size_t j = same[std::uniform_int_distribution<std::size_t>(0, same.size() - 1)(rng)];
        std::copy_n(x_l.data().data() + j * voxels, voxels, b.x_pair.data().data() + i * voxels);
    }

    try {
        ad::Tape tape;
        Forward f(tape, true, false);
        b.x_g = s.generator().forward(f, tape.constant(b.z), one_hot(b.y_g, cfg.class_count)).value();
    } catch (const NumericError& e) {
        throw StepError("generator", e.what());
    }
    return b;
}

double discriminator_update(ThreePlayerState& s, const StepBatch& b, double lr, StepReport* report) {
    const GanConfig& cfg = s.config();
    const std::size_t nr = b.y_l.size(), nc = b.y_c.size(), ng = b.y_g.size(), m = nr + nc + ng;
    const auto real = labeled_pair(b.x_l, b.y_l, cfg.class_count);
    const auto cls = labeled_pair(b.x_u, b.y_c, cfg.class_count);
    const auto gen = labeled_pair(b.x_g, b.y_g, cfg.class_count);
    const auto input = concat_batch({&real, &cls, &gen});

    ad::Tape tape;
    Forward f(tape, true);
    auto d = ad::sigmoid(s.discriminator().forward(f, tape.constant(input)));
    DenseTensor w_fake = column_weights(m, nr, nr + nc, cfg.alpha / double(nc));
    for (std::size_t i = nr + nc; i < m; ++i) w_fake[i] = (1.0 - cfg.alpha) / double(ng);
    auto loss = ad::scale(ad::add(ad::sum(ad::mul(log_prob(d), tape.constant(column_weights(m, 0, nr, 1.0 / double(nr))))),
                                  ad::sum(ad::mul(log_one_minus(d), tape.constant(std::move(w_fake))))),
                          -1.0);
    const double value = loss.value()[0];
    const auto grads = gather_gradients(f, tape.backward(loss), s.discriminator().params());
    if (report) {
        const auto& dv = d.value();
        report->d_real.assign(dv.data().begin(), dv.data().begin() + static_cast<std::ptrdiff_t>(nr));
        report->d_c.assign(dv.data().begin() + static_cast<std::ptrdiff_t>(nr),
                           dv.data().begin() + static_cast<std::ptrdiff_t>(nr + nc));
        report->d_g.assign(dv.data().begin() + static_cast<std::ptrdiff_t>(nr + nc), dv.data().end());
        report->loss_d = value;
        report->grad_norm_d = norm_of(grads);
    }
    nesterov_update(s.discriminator().params(), grads, s.velocity("discriminator"), lr, cfg.momentum, cfg.weight_decay);
    if (!all_finite(s.discriminator().params())) throw NumericError("non-finite discriminator parameter after update");
    return value;
}

double classifier_update(ThreePlayerState& s, const StepBatch& b, double lr, StepReport* report) {
    const GanConfig& cfg = s.config();
    ad::Tape tape;
    Forward f(tape, true);
    auto r_l = ad::softmax_cross_entropy(s.classifier().forward(f, tape.constant(b.x_l)), b.y_l);
    auto loss = r_l;
    double r_p_value = 0.0;
    if (s.epoch >= rp_start(cfg)) {
        auto r_p = ad::softmax_cross_entropy(s.classifier().forward(f, tape.constant(b.x_g)), b.y_g);
        r_p_value = r_p.value()[0];
        loss = ad::add(r_l, ad::scale(r_p, cfg.alpha_p));
    }
    const double value = loss.value()[0];
    const auto grads = gather_gradients(f, tape.backward(loss), s.classifier().params());
    if (report) {
        report->r_l = r_l.value()[0];
        report->r_p = r_p_value;
        report->unsup = report->d_c.empty()
                            ? 0.0
                            : mean_of(report->d_c, [](double d) { return std::log(1.0 - clamp_prob(d)); });
        report->loss_c = value + report->unsup;
        report->grad_norm_c = norm_of(grads);
    }
    nesterov_update(s.classifier().params(), grads, s.velocity("classifier"), lr, cfg.momentum, cfg.weight_decay);
    if (!all_finite(s.classifier().params())) throw NumericError("non-finite classifier parameter after update");
    return value;
}

double generator_update(ThreePlayerState& s, const StepBatch& b, double lr, StepReport* report) {
    const GanConfig& cfg = s.config();
    const std::size_t nr = b.y_l.size(), nc = b.y_c.size(), ng = b.y_g.size(), m = nr + nc + ng;
    const auto onehot = one_hot(b.y_g, cfg.class_count);
    ad::Tape tape;
    Forward fg(tape, true);
    Forward fd(tape, true, false);
    auto x_g = s.generator().forward(fg, tape.constant(b.z), onehot);
    auto gen_pair = ad::concat_channels(
        {x_g, tape.constant(label_channels(onehot, b.x_g.dim(1), b.x_g.dim(2), b.x_g.dim(3)))});
    auto input = concat_batch({tape.constant(labeled_pair(b.x_l, b.y_l, cfg.class_count)),
                               tape.constant(labeled_pair(b.x_u, b.y_c, cfg.class_count)), gen_pair});
    auto d = ad::sigmoid(s.discriminator().forward(fd, input));
    auto adv = ad::sum(ad::mul(log_one_minus(d), tape.constant(column_weights(m, nr + nc, m, 1.0 / double(ng)))));
    auto l1 = ad::l1_distance(x_g, tape.constant(b.x_pair));
    auto loss = ad::add(adv, ad::scale(l1, cfg.lambda_l1));
    const double value = loss.value()[0];
    const auto grads = gather_gradients(fg, tape.backward(loss), s.generator().params());
    if (report) {
        report->loss_g = value;
        report->l1 = l1.value()[0];
        report->grad_norm_g = norm_of(grads);
    }
    nesterov_update(s.generator().params(), grads, s.velocity("generator"), lr, cfg.momentum, cfg.weight_decay);
    if (!all_finite(s.generator().params())) throw NumericError("non-finite generator parameter after update");
    return value;
}

StepReport train_step(ThreePlayerState& s, const DenseTensor& x_l, const std::vector<std::size_t>& y_l,
                       const DenseTensor& x_u, double lr, std::uint64_t seed) {
    const StateSnapshot before = snapshot(s);
    StepReport r;
    std::string player;
    try {
        const StepBatch b = prepare_step(s, x_l, y_l, x_u, seed);
        player = "discriminator";
        discriminator_update(s, b, lr, &r);
        player = "classifier";
        classifier_update(s, b, lr, &r);
        player = "generator";
        generator_update(s, b, lr, &r);
    } catch (const StepError&) {
        restore(s, before);
        throw;
    } catch (const NumericError& e) {
        restore(s, before);
        throw StepError(player, e.what());
    }
    r.labeled_used = y_l.size();
    r.unlabeled_used = x_u.dim(0);
    ++s.counters.steps;
    s.counters.labeled_samples += r.labeled_used;
    s.counters.unlabeled_samples += r.unlabeled_used;
    s.counters.unlabeled_batches += r.unlabeled_used > 0 ? 1 : 0;
    return r;
}

// ---- training loop -------------------------------------------------------------------------------

DenseTensor stack_volumes(const std::vector<const VolumeSample*>& samples) {
    if (samples.empty()) throw ArgumentError("stack_volumes: no samples");
    std::vector<const DenseTensor*> vs;
    for (const auto* s : samples) vs.push_back(&s->volume);
    Shape shape{samples.size()};
    const Shape& one = samples.front()->volume.shape();
    shape.insert(shape.end(), one.begin(), one.end());
    std::vector<double> data;
    data.reserve(shape_size(shape));
    for (const auto* v : vs) {
        if (v->shape() != one) throw ShapeError("stack_volumes: volumes differ in shape");
        data.insert(data.end(), v->data().begin(), v->data().end());
    }
    return DenseTensor(shape, std::move(data));
}

DenseTensor classify(ThreePlayerState& s, const DenseTensor& x) {
    const std::size_t n = x.dim(0), chunk = 32;
    const std::size_t per = x.size() / std::max<std::size_t>(n, 1);
    std::vector<double> out;
    for (std::size_t start = 0; start < n; start += chunk) {
        const std::size_t m = std::min(chunk, n - start);
        Shape shape = x.shape();
        shape[0] = m;
        DenseTensor part(shape, std::vector<double>(x.data().begin() + static_cast<std::ptrdiff_t>(start * per),
                                                    x.data().begin() + static_cast<std::ptrdiff_t>((start + m) * per)));
        ad::Tape tape;
        Forward f(tape, false, false);
        const auto p = ad::softmax_rows(s.classifier().forward(f, tape.constant(part)).value());
        out.insert(out.end(), p.data().begin(), p.data().end());
    }
    return DenseTensor({n, s.config().class_count}, std::move(out));
}

DenseTensor sample_with_latent(ThreePlayerState& s, std::size_t label, const DenseTensor& z) {
    if (label >= s.config().class_count) throw ArgumentError("sample: label " + std::to_string(label) + " out of range");
    ad::Tape tape;
    Forward f(tape, false, false);
    return s.generator().forward(f, tape.constant(z), one_hot(std::vector<std::size_t>(z.dim(0), label),
                                                               s.config().class_count)).value();
}

DenseTensor sample(ThreePlayerState& s, std::size_t label, std::size_t count, std::uint64_t seed) {
    if (count == 0) throw ArgumentError("sample: count must be positive");
    std::mt19937_64 rng(seed);
    std::uniform_real_distribution<double> sym(-1.0, 1.0);
    DenseTensor z({count, s.config().latent_dim});
    for (auto& v : z.data()) v = sym(rng);
    return sample_with_latent(s, label, z);
}

void refresh_batch_norm(ThreePlayerState& s, const std::vector<VolumeSample>& train_samples, std::uint64_t seed) {
    const GanConfig& cfg = s.config();
    const std::size_t bsz = cfg.batch_size;
    auto apply = [](std::map<const BatchNorm*, BnAccumulator>& stats, const std::vector<BatchNorm*>& bns) {
        for (BatchNorm* bn : bns) {
            auto it = stats.find(bn);
            if (it == stats.end() || it->second.batches == 0) continue;
            const double k = static_cast<double>(it->second.batches);
            for (std::size_t c = 0; c < bn->channels(); ++c) {
                bn->running_mean[c] = it->second.mean_sum[c] / k;
                bn->running_var[c] = it->second.var_sum[c] / k;
            }
        }
    };

    std::map<const BatchNorm*, BnAccumulator> c_stats;
    for (std::size_t start = 0; start < train_samples.size(); start += bsz) {
        std::vector<const VolumeSample*> batch;
        for (std::size_t i = start; i < std::min(train_samples.size(), start + bsz); ++i)
            batch.push_back(&train_samples[i]);
        ad::Tape tape;
        Forward f(tape, true, false);
        f.bn_stats = &c_stats;
        s.classifier().forward(f, tape.constant(stack_volumes(batch)));
    }
    apply(c_stats, s.classifier().batch_norms());

    std::mt19937_64 rng(seed);
    std::uniform_real_distribution<double> sym(-1.0, 1.0);
    std::uniform_int_distribution<std::size_t> cls(0, cfg.class_count - 1);
    std::map<const BatchNorm*, BnAccumulator> g_stats;
    const std::size_t batches = std::max<std::size_t>(1, (train_samples.size() + bsz - 1) / bsz);
    for (std::size_t b = 0; b < batches; ++b) {
        DenseTensor z({bsz, cfg.latent_dim});
        for (auto& v : z.data()) v = sym(rng);
        std::vector<std::size_t> y(bsz);
        for (auto& v : y) v = cls(rng);
        ad::Tape tape;
        Forward f(tape, true, false);
        f.bn_stats = &g_stats;
        s.generator().forward(f, tape.constant(z), one_hot(y, cfg.class_count));
    }
    apply(g_stats, s.generator().batch_norms());
}

TrainResult train(ThreePlayerState& s, const DatasetSplit& split, const TrainOptions& options) {
    const GanConfig& cfg = s.config();
    TrainResult result;
    std::vector<const VolumeSample*> labeled, unlabeled;
    for (const auto& x : split.train) (x.label ? labeled : unlabeled).push_back(&x);
    if (labeled.empty()) throw ArgumentError("train: no labeled training samples");
    if (unlabeled.empty())
        for (const auto& x : split.train) unlabeled.push_back(&x);

    std::vector<const VolumeSample*> val;
    std::vector<std::size_t> val_labels;
    for (const auto& x : split.validation) {
        if (!x.label) throw ArgumentError("train: validation sample " + x.id + " has no label");
        val.push_back(&x);
        val_labels.push_back(*x.label);
    }
    if (s.epoch < cfg.epochs) {
        std::vector<bool> seen(cfg.class_count, false);
        for (std::size_t y : val_labels) {
            if (y >= cfg.class_count) throw ArgumentError("train: validation label outside class_count");
            seen[y] = true;
        }
        if (std::find(seen.begin(), seen.end(), false) != seen.end()) {
            throw ArgumentError("train: the validation split needs at least one sample of every class");
        }
    }
    const DenseTensor val_x = val.empty() ? DenseTensor() : stack_volumes(val);

    const std::size_t bsz = cfg.batch_size;
    for (std::size_t e = s.epoch; e < cfg.epochs; ++e) {
        EpochRecord rec;
        rec.epoch = e;
        rec.lr = learning_rate(cfg, e);
        std::mt19937_64 rng(mix_seed({cfg.seed, e, 0x5eed}));
        auto lperm = labeled;
        auto uperm = unlabeled;
        std::shuffle(lperm.begin(), lperm.end(), rng);
        std::shuffle(uperm.begin(), uperm.end(), rng);
        const std::size_t steps = (std::max(lperm.size(), uperm.size()) + bsz - 1) / bsz;
        try {
            for (std::size_t step = 0; step < steps; ++step) {
                std::vector<const VolumeSample*> lb, ub;
                std::vector<std::size_t> y;
                for (std::size_t j = 0; j < bsz; ++j) {
                    const auto* l = lperm[(step * bsz + j) % lperm.size()];
                    lb.push_back(l);
                    y.push_back(*l->label);
                    ub.push_back(uperm[(step * bsz + j) % uperm.size()]);
                }
                const auto r = train_step(s, stack_volumes(lb), y, stack_volumes(ub), rec.lr,
                                          mix_seed({cfg.seed, e, step, 0x57e9}));
                rec.loss_d += r.loss_d;
                rec.loss_c += r.loss_c;
                rec.loss_g += r.loss_g;
                ++rec.steps;
            }
        } catch (const StepError& err) {
            result.failure = fmt::format("epoch {}: {}", e, err.what());
            return result;
        }
        const double k = static_cast<double>(std::max<std::size_t>(rec.steps, 1));
        rec.loss_d /= k;
        rec.loss_c /= k;
        rec.loss_g /= k;
        s.epoch = e + 1;
        refresh_batch_norm(s, split.train, mix_seed({cfg.seed, e, 0xb17}));
        if (!val.empty()) {
            const auto report = evaluate_predictions(classify(s, val_x), val_labels);
            rec.val_acc = report.accuracy;
            rec.val_auc = report.auc;
        }
        result.history.push_back(rec);
        if (rec.val_acc > result.best_val_acc || (rec.val_acc == result.best_val_acc && rec.val_auc > result.best_val_auc)) {
            result.best_val_acc = rec.val_acc;
            result.best_val_auc = rec.val_auc;
            result.best_epoch = e;
            result.best = snapshot(s);
        }
        if (options.on_epoch) options.on_epoch(rec, s);
    }
    return result;
}

}  // namespace ttgan
