#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <map>
#include <memory>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "cortisphere/icosphere.hpp"
#include "cortisphere/matrix.hpp"
#include "cortisphere/sparse.hpp"

// Reverse-mode differentiation over a fixed set of matrix operations.
//
// A Tape records every operation applied to its variables in execution order,
// which is a topological order by construction. backpropagate() walks the
// record backwards applying each operation's exact vector-Jacobian product.
// ReLU, clamp and L1 use subgradient 0 at their kinks.
namespace cortisphere::num {

enum class OpKind : std::uint8_t {
    leaf,
    matrix_multiply,
    transpose,
    add,
    subtract,
    multiply,
    scale_by_constant,
    offset_by_constant,
    add_row_bias,
    pointwise_relu,
    ring_gather,
    sparse_combine,
    row_sum,
    row_mean_reduce,
    mean_all,
    masked_sum,
    softmax_row,
    log_sum_exp_row,
    l2_normalize_row,
    clamp,
    mse,
    l1,
    concat_channels,
};

std::string_view op_name(OpKind kind);

class Tape;

// Handle to a node on a tape. Cheap to copy; valid as long as the tape lives.
struct Var {
    Tape* tape = nullptr;
    std::size_t id = 0;

    const Matrix& value() const;
    std::size_t rows() const { return value().rows(); }
    std::size_t cols() const { return value().cols(); }
};

// Insertion-ordered named matrices. Used for model parameters, gradients and
// optimizer moments alike.
class ParameterSet {
public:
    using Entry = std::pair<std::string, Matrix>;

    void add(std::string name, Matrix value);
    bool contains(std::string_view name) const;
    Matrix& at(std::string_view name);
    const Matrix& at(std::string_view name) const;

    std::size_t size() const noexcept { return entries_.size(); }
    std::size_t scalar_count() const;
    bool empty() const noexcept { return entries_.empty(); }

    auto begin() { return entries_.begin(); }
    auto end() { return entries_.end(); }
    auto begin() const { return entries_.begin(); }
    auto end() const { return entries_.end(); }

    // Same names and shapes, all zeros.
    ParameterSet zeros_like() const;

    friend bool operator==(const ParameterSet& a, const ParameterSet& b) { return a.entries_ == b.entries_; }

private:
    std::vector<Entry> entries_;
    std::map<std::string, std::size_t, std::less<>> index_;
};

using Gradients = ParameterSet;

// Parameter handles bound on one tape, looked up by name.
class BoundParameters {
public:
    void insert(const std::string& name, Var v) { vars_.emplace(name, v); }
    Var operator[](std::string_view name) const;
    bool contains(std::string_view name) const { return vars_.find(name) != vars_.end(); }

private:
    std::map<std::string, Var, std::less<>> vars_;
};

struct NodeAux {
    double a = 0.0;
    double b = 0.0;
    Matrix saved;  // op-specific cached forward quantity (norms, masks, ...)
    Matrix mask;   // element or row weights for masked ops
    const std::vector<icosphere::NeighborRow>* ring = nullptr;
    const SparseRows* sparse = nullptr;
    std::shared_ptr<const SparseRows> owned_sparse;
};

class Tape {
public:
    Tape() = default;
    Tape(const Tape&) = delete;
    Tape& operator=(const Tape&) = delete;

    Var constant(Matrix value);
    Var parameter(const std::string& name, Matrix value);
    BoundParameters bind(const ParameterSet& parameters);

    const Matrix& value(Var v) const;
    const Matrix& value(std::size_t id) const { return nodes_[id].value; }
    OpKind kind(Var v) const { return nodes_[v.id].kind; }

    std::size_t node_count() const noexcept { return nodes_.size(); }
    // Nodes other than leaves.
    std::size_t compute_node_count() const noexcept;

    // Reverse sweep from `output`. Returns a gradient for every parameter
    // recorded on the tape, zero-filled where the output does not depend on it.
    Gradients backpropagate(Var output, const Matrix& output_gradient);
    Gradients backpropagate(Var output) { return backpropagate(output, Matrix::scalar(1.0)); }
    // Gradient of any node from the most recent backpropagate().
    const Matrix& gradient(Var v) const;

    // When enabled, relu/clamp/l1 fold their activation pattern into a hash
    // so a finite-difference probe can tell when it crossed a kink.
    void set_track_kinks(bool on) noexcept { track_kinks_ = on; }
    std::uint64_t kink_signature() const noexcept { return kink_signature_; }

    // Internal: append a computed node.
    Var record(OpKind kind, std::vector<std::size_t> inputs, Matrix value, NodeAux aux = {});
    void note_kinks(const std::vector<std::uint8_t>& pattern);
    bool tracking_kinks() const noexcept { return track_kinks_; }

private:
    struct Node {
        OpKind kind = OpKind::leaf;
        std::vector<std::size_t> inputs;
        Matrix value;
        NodeAux aux;
        std::string parameter_name; // empty for constants and computed nodes
    };

    void accumulate(std::size_t id, const Matrix& g);
    void accumulate(std::size_t id, Matrix&& g);

    std::vector<Node> nodes_;
    std::vector<Matrix> grads_;
    bool track_kinks_ = false;
    std::uint64_t kink_signature_ = 0xcbf29ce484222325ULL;
};

// ---- operations --------------------------------------------------------

Var matmul(Var a, Var b);
Var transpose(Var a);
Var add(Var a, Var b);
Var subtract(Var a, Var b);
Var multiply(Var a, Var b); // elementwise
Var scale(Var a, double factor);
Var offset(Var a, double constant);
Var add_row_bias(Var a, Var bias); // bias is 1 x cols
Var relu(Var a);
// V x C -> V x 7C: row i holds rows table[i][0..6] of the input side by side.
Var ring_gather(Var a, const std::vector<icosphere::NeighborRow>& table);
// `op` must outlive the tape.
Var sparse_combine(Var a, const SparseRows& op);
Var sparse_combine(Var a, std::shared_ptr<const SparseRows> op);
Var row_sum(Var a);          // n x C -> n x 1
Var row_mean_reduce(Var a);  // n x C -> 1 x C, mean over rows
Var mean_all(Var a);         // -> 1 x 1
Var masked_sum(Var a, const Matrix& mask); // mask same shape, -> 1 x 1
Var softmax_row(Var a);
Var log_sum_exp_row(Var a);  // n x C -> n x 1, max-shifted
// Only entries with mask != 0 take part; every row needs at least one.
Var log_sum_exp_row(Var a, const Matrix& mask);
Var l2_normalize_row(Var a);
Var clamp(Var a, double lo, double hi);
// Weighted mean of squared / absolute differences. `weights` is empty (all
// entries), rows x 1 (per-row) or the full shape. Result is 1 x 1.
Var mse(Var a, Var b, const Matrix& weights = {});
Var l1(Var a, Var b, const Matrix& weights = {});
Var concat_channels(Var a, Var b);

// ---- tracing and verification -----------------------------------------

using Program = std::function<Var(Tape&, const BoundParameters&)>;

struct Trace {
    std::unique_ptr<Tape> tape;
    Var output;
};

Trace trace_forward(const Program& program, const ParameterSet& parameters);

struct FiniteDifferenceOptions {
    double tolerance = 1e-6;
    double step = 1e-5;
    // Relative error is |analytic - numeric| / max(|analytic|, |numeric|, floor).
    double denominator_floor = 1e-6;
    // 0 checks every entry; otherwise a seeded sample of this many per tensor.
    std::size_t max_entries_per_parameter = 0;
    std::uint64_t seed = 0;
};

struct FiniteDifferenceReport {
    double max_rel_error = 0.0;
    std::string worst_parameter;
    std::size_t worst_index = 0;
    std::size_t checked = 0;
    // Entries whose +/- probes changed a relu/clamp/l1 activation pattern.
    std::size_t kink_excluded = 0;
    double tolerance = 0.0;
    bool passed = false;
};

FiniteDifferenceReport finite_difference_check(const Program& program, const ParameterSet& parameters,
                                               const FiniteDifferenceOptions& options = {});

} // namespace cortisphere::num
