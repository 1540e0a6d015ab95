#include "ttgan/gradcheck_suite.hpp"

#include <functional>
#include <memory>
#include <random>

#include "ttgan/errors.hpp"
#include "ttgan/layers.hpp"
#include "ttgan/network.hpp"

namespace ttgan {

namespace {

using Vars = std::vector<ad::Variable>;

DenseTensor uniform(Shape shape, std::uint64_t seed, double lo = -1.0, double hi = 1.0) {
    std::mt19937_64 rng(seed);
    std::uniform_real_distribution<double> u(lo, hi);
    DenseTensor t(std::move(shape));
    for (auto& v : t.data()) v = u(rng);
    return t;
}

ad::Variable project(ad::Tape& tape, ad::Variable y, std::uint64_t seed) {
    return ad::sum(ad::mul(y, tape.constant(uniform(y.shape(), seed))));
}

ad::GradCheckCase unary(std::string name, DenseTensor x, std::function<ad::Variable(ad::Variable)> op) {
    return {std::move(name), {{"x", std::move(x)}},
            [op](ad::Tape& t, const Vars& p) { return project(t, op(p[0]), 101); }};
}

ad::GradCheckCase binary(std::string name, DenseTensor a, DenseTensor b,
                         std::function<ad::Variable(ad::Variable, ad::Variable)> op) {
    return {std::move(name), {{"a", std::move(a)}, {"b", std::move(b)}},
            [op](ad::Tape& t, const Vars& p) { return project(t, op(p[0], p[1]), 102); }};
}

// First parameter is the layer input, the rest are the layer's own parameters.
template <class Layer>
ad::GradCheckCase layer_case(std::string name, std::shared_ptr<Layer> layer, ParamRefs params, DenseTensor x,
                             std::function<ad::Variable(Layer&, Forward&, ad::Variable)> body) {
    ad::GradCheckCase c;
    c.name = std::move(name);
    c.parameters.push_back({"input", std::move(x)});
    for (const Param* p : params) c.parameters.push_back({p->name, p->value});
    c.build = [layer, params, body](ad::Tape& tape, const Vars& vars) {
        Forward fwd(tape, true);
        for (std::size_t i = 0; i < params.size(); ++i) fwd.bind_to(*params[i], vars[i + 1]);
        return project(tape, body(*layer, fwd, vars[0]), 4242);
    };
    return c;
}

template <class Layer>
ParamRefs collected(Layer& layer) {
    ParamRefs ps;
    layer.collect(ps);
    return ps;
}

ad::GradCheckCase primitive_case(std::string_view name) {
    const std::string n(name);
    if (n == "add") return binary(n, uniform({2, 3}, 20), uniform({3}, 21), ad::add);
    if (n == "mul") return binary(n, uniform({2, 3}, 22), uniform({2, 3}, 23), ad::mul);
    if (n == "matmul") return binary(n, uniform({3, 4}, 24), uniform({4, 2}, 25), ad::matmul);
    if (n == "conv3d") {
        return binary(n, uniform({2, 4, 4, 4, 2}, 29), uniform({3, 3, 3, 2, 2}, 30),
                      [](ad::Variable x, ad::Variable k) { return ad::conv3d(x, k, 2, 1); });
    }
    if (n == "transposed_conv3d") {
        return binary(n, uniform({2, 2, 2, 2, 3}, 31), uniform({4, 4, 4, 2, 3}, 32),
                      [](ad::Variable x, ad::Variable k) { return ad::transposed_conv3d(x, k, 2, 1); });
    }
    if (n == "reshape") return unary(n, uniform({2, 3, 4}, 33), [](ad::Variable x) { return ad::reshape(x, {6, 4}); });
    if (n == "permute") return unary(n, uniform({2, 3, 4}, 34), [](ad::Variable x) { return ad::permute(x, {2, 0, 1}); });
    if (n == "concat_channels") {
        return binary(n, uniform({2, 2, 3}, 35), uniform({2, 2, 1}, 36),
                      [](ad::Variable a, ad::Variable b) { return ad::concat_channels({a, b, a}); });
    }
    if (n == "batch_norm" || n == "batch_norm_eval") {
        const bool eval = n == "batch_norm_eval";
        return {n,
                {{"x", uniform({3, 2, 2, 3}, 37)}, {"gamma", uniform({3}, 38, 0.5, 1.5)}, {"beta", uniform({3}, 39)}},
                [eval](ad::Tape& t, const Vars& p) {
                    auto y = eval ? ad::batch_norm_eval(p[0], p[1], p[2], DenseTensor({3}, {0.1, -0.2, 0.3}),
                                                        DenseTensor({3}, {1.5, 0.5, 2.0}))
                                  : ad::batch_norm(p[0], p[1], p[2]);
                    return project(t, y, 103);
                }};
    }
    if (n == "lrelu") return unary(n, uniform({3, 4}, 40, -2, 2), [](ad::Variable x) { return ad::lrelu(x, 0.2); });
    if (n == "tanh") return unary(n, uniform({3, 4}, 41, -2, 2), ad::tanh);
    if (n == "sigmoid") return unary(n, uniform({3, 4}, 42, -2, 2), ad::sigmoid);
    if (n == "average_pool3d") {
        return unary(n, uniform({2, 4, 4, 4, 2}, 43), [](ad::Variable x) { return ad::average_pool3d(x, 2); });
    }
    if (n == "covariance_pool") return unary(n, uniform({2, 2, 2, 2, 3}, 44), ad::covariance_pool);
    if (n == "row_normalize") return unary(n, uniform({2, 3, 3}, 45), ad::row_normalize);
    if (n == "scale_channels") return binary(n, uniform({2, 2, 2, 2, 3}, 46), uniform({2, 3}, 47), ad::scale_channels);
    if (n == "softmax_cross_entropy") {
        return {n, {{"logits", uniform({4, 3}, 48, -3, 3)}},
                [](ad::Tape&, const Vars& p) { return ad::softmax_cross_entropy(p[0], {0, 2, 1, 2}); }};
    }
    if (n == "l1_distance") {
        return {n, {{"a", uniform({3, 3}, 49)}, {"b", uniform({3, 3}, 50)}},
                [](ad::Tape&, const Vars& p) { return ad::l1_distance(p[0], p[1]); }};
    }
    if (n == "affine") {
        return {n, {{"x", uniform({2, 3, 4}, 51)}, {"w", uniform({4, 5}, 52)}, {"b", uniform({5}, 53)}},
                [](ad::Tape& t, const Vars& p) { return project(t, ad::affine(p[0], p[1], p[2]), 104); }};
    }
    if (n == "sum") return {n, {{"x", uniform({2, 3}, 54)}}, [](ad::Tape& t, const Vars& p) {
                                return ad::mul(ad::sum(p[0]), ad::sum(ad::mul(p[0], t.constant(uniform({2, 3}, 55)))));
                            }};
    if (n == "mean") return {n, {{"x", uniform({2, 3}, 56)}}, [](ad::Tape& t, const Vars& p) {
                                 return ad::mul(ad::mean(p[0]), ad::sum(ad::mul(p[0], t.constant(uniform({2, 3}, 57)))));
                             }};
    if (n == "scale") return unary(n, uniform({5}, 58), [](ad::Variable x) { return ad::scale(x, -2.0, 0.5); });
    if (n == "clamped_log") {
        return unary(n, uniform({5}, 59, 0.2, 0.9), [](ad::Variable x) { return ad::clamped_log(x, 1e-7, 1 - 1e-7); });
    }
    throw ArgumentError("unknown gradient check \"" + n + "\"");
}

ad::GradCheckCase composite_case(std::string_view name) {
    const std::string n(name);
    if (n == "ttlinear") {
        auto l = std::make_shared<TTLinear>("lin", 12, 6, 3, 3, 1);
        return layer_case<TTLinear>(n, l, collected(*l), uniform({3, 12}, 2),
                                    [](TTLinear& m, Forward& f, ad::Variable x) { return m.forward(f, x); });
    }
    if (n == "ttconv" || n == "ttconv_contraction") {
        auto c = std::make_shared<TTConv3d>("conv", 6, 4, 3, 1, 1, 3, 2, 3);
        const ConvPath path = n == "ttconv" ? ConvPath::materialized : ConvPath::contraction;
        return layer_case<TTConv3d>(n, c, collected(*c), uniform({2, 3, 3, 3, 6}, 4),
                                    [path](TTConv3d& m, Forward& f, ad::Variable x) { return m.forward(f, x, path); });
    }
    if (n == "gsp") {
        auto g = std::make_shared<GSPBlock>("gsp", 12, 5);
        return layer_case<GSPBlock>(n, g, collected(*g), uniform({2, 2, 2, 2, 12}, 6),
                                    [](GSPBlock& m, Forward& f, ad::Variable x) { return m.forward(f, x); });
    }
    if (n == "dense_block") {
        auto b = std::make_shared<DenseBlock3d>("block", 3, 2, 2, true, 2, 2, 7);
        return layer_case<DenseBlock3d>(n, b, collected(*b), uniform({2, 3, 3, 3, 3}, 8),
                                        [](DenseBlock3d& m, Forward& f, ad::Variable x) { return m.forward(f, x); });
    }
    if (n == "transition") {
        auto t = std::make_shared<Transition>("transition", 6, 0.5, 2, 2, 9);
        return layer_case<Transition>(n, t, collected(*t), uniform({2, 4, 4, 4, 6}, 10),
                                      [](Transition& m, Forward& f, ad::Variable x) { return m.forward(f, x); });
    }
    if (n == "generator_stage" || n == "generator_output_stage") {
        auto s = std::make_shared<GeneratorStage>("stage", 4, 2, 3, n == "generator_output_stage", 11);
        const auto labels = one_hot({1, 0, 1}, 2);
        return layer_case<GeneratorStage>(
            n, s, collected(*s), uniform({3, 2, 2, 2, 4}, 12),
            [labels](GeneratorStage& m, Forward& f, ad::Variable x) { return m.forward(f, x, labels); });
    }
    if (n == "classifier") {
        DenseNetConfig cfg;
        cfg.depth = 10;
        cfg.growth = 2;
        cfg.rank = 2;
        cfg.tt_cores = 2;
        std::shared_ptr<DenseNet3d> net = classifier_assemble(cfg);
        return layer_case<DenseNet3d>(n, net, net->params(), uniform({2, 8, 8, 8, 1}, 13),
                                      [](DenseNet3d& m, Forward& f, ad::Variable x) { return m.forward(f, x); });
    }
    return primitive_case(name);
}

}  // namespace

std::vector<std::string> primitive_check_names() {
    std::vector<std::string> out;
    for (int i = 0; i < ad::kPrimitiveCount; ++i) out.emplace_back(ad::primitive_name(static_cast<ad::Primitive>(i)));
    out.emplace_back("batch_norm_eval");
    return out;
}

std::vector<std::string> layer_check_names() {
    return {"ttlinear",   "ttconv",          "ttconv_contraction",     "gsp",       "dense_block",
            "transition", "generator_stage", "generator_output_stage", "classifier"};
}

ad::GradCheckCase make_check_case(std::string_view name) { return composite_case(name); }

}  // namespace ttgan
