#pragma once

#include <cstdint>
#include <functional>
#include <limits>
#include <map>
#include <string>
#include <string_view>
#include <deque>
#include <vector>

#include "ttgan/tensor.hpp"

namespace ttgan::ad {

// Reverse-mode differentiation over DenseTensor values.
//
// A Tape records primitive applications in execution order. Values are
// computed eagerly at record time; backward() replays the record in reverse
// and never mutates it, so it may be called repeatedly.

enum class Primitive : int {
    add,
    mul,
    matmul,
    conv3d,
    transposed_conv3d,
    reshape,
    concat_channels,
    batch_norm,
    lrelu,
    tanh,
    sigmoid,
    average_pool3d,
    covariance_pool,
    scale_channels,
    softmax_cross_entropy,
    l1_distance,
    affine,
    // structural helpers used by the composite layers and losses
    permute,
    sum,
    mean,
    scale,
    clamped_log,
    row_normalize,
    count_
};

inline constexpr int kPrimitiveCount = static_cast<int>(Primitive::count_);

std::string_view primitive_name(Primitive p);
/// Throws ContractError for names outside the supported set.
Primitive primitive_from_name(std::string_view name);

/// Per-primitive parameters. Only the fields a primitive reads matter.
struct Attrs {
    std::size_t stride = 1;
    std::size_t pad = 0;
    std::size_t output_padding = 0;
    std::size_t window = 2;
    double slope = 0.2;            // lrelu
    double eps = 1e-5;             // batch_norm
    bool training = true;          // batch_norm
    double a = 1.0, b = 0.0;       // scale: a*x + b
    double lo = 0.0;               // clamped_log
    double hi = std::numeric_limits<double>::infinity();
    Shape shape;                   // reshape
    std::vector<std::size_t> axes; // permute
    std::vector<std::size_t> labels;  // softmax_cross_entropy
    DenseTensor running_mean;      // batch_norm, evaluation mode
    DenseTensor running_var;
};

class Tape;

/// Handle to a value recorded on a tape.
class Variable {
public:
    Variable() = default;
    Variable(Tape* tape, std::size_t id) : tape_(tape), id_(id) {}

    std::size_t id() const noexcept { return id_; }
    Tape* tape() const noexcept { return tape_; }
    const DenseTensor& value() const;
    const Shape& shape() const { return value().shape(); }
    bool valid() const noexcept { return tape_ != nullptr; }

private:
    Tape* tape_ = nullptr;
    std::size_t id_ = 0;
};

/// Gradient per variable id; holds an entry for every requires_grad leaf.
using Gradients = std::map<std::size_t, DenseTensor>;

class Tape {
public:
    Tape() = default;
    Tape(const Tape&) = delete;
    Tape& operator=(const Tape&) = delete;

    Variable leaf(DenseTensor value, bool requires_grad);
    Variable parameter(DenseTensor value) { return leaf(std::move(value), true); }
    Variable constant(DenseTensor value) { return leaf(std::move(value), false); }

    /// Apply a primitive eagerly and append it to the record.
    Variable record(Primitive primitive, const std::vector<Variable>& inputs, Attrs attrs = {});

    /// Gradients of a scalar ([1]) variable with respect to all requires_grad leaves.
    Gradients backward(const Variable& loss) const;

    const DenseTensor& value(std::size_t id) const { return nodes_.at(id).value; }
    /// Auxiliary tensors kept for backward (e.g. batch statistics).
    const std::vector<DenseTensor>& saved(std::size_t id) const { return nodes_.at(id).saved; }
    bool requires_grad(std::size_t id) const { return nodes_.at(id).requires_grad; }
    std::size_t size() const noexcept { return nodes_.size(); }

    struct Node {
        bool is_leaf = false;
        Primitive primitive = Primitive::add;
        std::vector<std::size_t> inputs;
        Attrs attrs;
        DenseTensor value;
        std::vector<DenseTensor> saved;
        bool requires_grad = false;
    };

private:
    std::deque<Node> nodes_;  // stable references across recording
};

// ---------------------------------------------------------------------------
// op wrappers
// ---------------------------------------------------------------------------

Variable add(Variable a, Variable b);
Variable sub(Variable a, Variable b);
Variable mul(Variable a, Variable b);
Variable matmul(Variable a, Variable b);
Variable affine(Variable x, Variable weight, Variable bias);
Variable conv3d(Variable x, Variable kernel, std::size_t stride = 1, std::size_t pad = 0);
Variable transposed_conv3d(Variable x, Variable kernel, std::size_t stride = 1, std::size_t pad = 0,
                           std::size_t output_padding = 0);
Variable reshape(Variable x, Shape shape);
Variable permute(Variable x, std::vector<std::size_t> axes);
Variable concat_channels(const std::vector<Variable>& xs);
Variable batch_norm(Variable x, Variable gamma, Variable beta, double eps = 1e-5);
Variable batch_norm_eval(Variable x, Variable gamma, Variable beta, DenseTensor running_mean,
                         DenseTensor running_var, double eps = 1e-5);
Variable lrelu(Variable x, double slope = 0.2);
Variable tanh(Variable x);
Variable sigmoid(Variable x);
Variable average_pool3d(Variable x, std::size_t window);
Variable covariance_pool(Variable x);
Variable row_normalize(Variable x);
Variable scale_channels(Variable x, Variable weights);
Variable softmax_cross_entropy(Variable logits, std::vector<std::size_t> labels);
Variable l1_distance(Variable a, Variable b);
Variable sum(Variable x);
Variable mean(Variable x);
Variable scale(Variable x, double a, double b = 0.0);
Variable clamped_log(Variable x, double lo, double hi);

// ---------------------------------------------------------------------------
// plain-value helpers shared with the loss and metric code
// ---------------------------------------------------------------------------

/// Row-wise softmax of [N,K] logits.
DenseTensor softmax_rows(const DenseTensor& logits);

// ---------------------------------------------------------------------------
// finite-difference gradient checking
// ---------------------------------------------------------------------------

struct NamedTensor {
    std::string name;
    DenseTensor value;
};

/// Builds a scalar loss from parameter variables (in the order supplied).
using GraphBuilder = std::function<Variable(Tape&, const std::vector<Variable>&)>;

struct GradCheckCase {
    std::string name;
    std::vector<NamedTensor> parameters;
    GraphBuilder build;
};

struct GradCheckEntry {
    std::string parameter;
    double max_error = 0.0;
};

struct GradCheckReport {
    std::vector<GradCheckEntry> entries;
    double max_error() const;
};

/// For each parameter, the max over `samples` seeded coordinates of
/// |analytic - central difference| / max(1, |central difference|).
GradCheckReport check_gradients(const GradCheckCase& c, std::uint64_t seed, std::size_t samples = 10,
                                double step = 1e-5);

}  // namespace ttgan::ad
