#include "cortisphere/numerics.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <utility>

#include "cortisphere/error.hpp"
#include "cortisphere/rng.hpp"

namespace cortisphere::num {
namespace {

Tape& same_tape(Var a, Var b, OpKind kind) {
    if (a.tape == nullptr || a.tape != b.tape)
        throw ContractError(std::string(op_name(kind)) + ": operands live on different tapes");
    return *a.tape;
}

Tape& tape_of(Var a, OpKind kind) {
    if (a.tape == nullptr) throw ContractError(std::string(op_name(kind)) + ": unbound variable");
    return *a.tape;
}

[[noreturn]] void shape_fail(OpKind kind, const Tape& tape, const std::string& detail) {
    throw ShapeError(std::string(op_name(kind)) + " (node " + std::to_string(tape.node_count()) +
                     "): " + detail);
}

void require_same_shape(OpKind kind, const Tape& tape, const Matrix& a, const Matrix& b) {
    if (!a.same_shape(b)) shape_fail(kind, tape, a.shape_string() + " vs " + b.shape_string());
}

// Expands empty / row / full weights to a full-shape weight matrix.
Matrix expand_weights(OpKind kind, const Tape& tape, const Matrix& like, const Matrix& weights) {
    if (weights.empty()) return Matrix(like.rows(), like.cols(), 1.0);
    if (weights.same_shape(like)) return weights;
    if (weights.rows() == like.rows() && weights.cols() == 1) {
        Matrix full(like.rows(), like.cols());
        for (std::size_t r = 0; r < like.rows(); ++r)
            for (std::size_t c = 0; c < like.cols(); ++c) full(r, c) = weights(r, 0);
        return full;
    }
    shape_fail(kind, tape, "weights " + weights.shape_string() + " do not fit " + like.shape_string());
}

Matrix elementwise(const Matrix& a, const Matrix& b, double (*f)(double, double)) {
    Matrix out(a.rows(), a.cols());
    for (std::size_t i = 0; i < a.size(); ++i) out[i] = f(a[i], b[i]);
    return out;
}

} // namespace

std::string_view op_name(OpKind kind) {
    switch (kind) {
    case OpKind::leaf: return "leaf";
    case OpKind::matrix_multiply: return "matrix_multiply";
    case OpKind::transpose: return "transpose";
    case OpKind::add: return "add";
    case OpKind::subtract: return "subtract";
    case OpKind::multiply: return "multiply";
    case OpKind::scale_by_constant: return "scale_by_constant";
    case OpKind::offset_by_constant: return "offset_by_constant";
    case OpKind::add_row_bias: return "add_row_bias";
    case OpKind::pointwise_relu: return "pointwise_relu";
    case OpKind::ring_gather: return "ring_gather";
    case OpKind::sparse_combine: return "sparse_combine";
    case OpKind::row_sum: return "row_sum";
    case OpKind::row_mean_reduce: return "row_mean_reduce";
    case OpKind::mean_all: return "mean_all";
    case OpKind::masked_sum: return "masked_sum";
    case OpKind::softmax_row: return "softmax_row";
    case OpKind::log_sum_exp_row: return "log_sum_exp_row";
    case OpKind::l2_normalize_row: return "l2_normalize_row";
    case OpKind::clamp: return "clamp";
    case OpKind::mse: return "mse";
    case OpKind::l1: return "l1";
    case OpKind::concat_channels: return "concat_channels";
    }
    return "unknown";
}

const Matrix& Var::value() const {
    if (tape == nullptr) throw ContractError("value of an unbound variable");
    return tape->value(*this);
}

// ---- ParameterSet ----------------------------------------------------------

void ParameterSet::add(std::string name, Matrix value) {
    if (index_.count(name) != 0) throw ConfigError("duplicate parameter name '" + name + "'");
    index_.emplace(name, entries_.size());
    entries_.emplace_back(std::move(name), std::move(value));
}

bool ParameterSet::contains(std::string_view name) const { return index_.find(name) != index_.end(); }

Matrix& ParameterSet::at(std::string_view name) {
    auto it = index_.find(name);
    if (it == index_.end()) throw ConfigError("unknown parameter '" + std::string(name) + "'");
    return entries_[it->second].second;
}

const Matrix& ParameterSet::at(std::string_view name) const {
    auto it = index_.find(name);
    if (it == index_.end()) throw ConfigError("unknown parameter '" + std::string(name) + "'");
    return entries_[it->second].second;
}

std::size_t ParameterSet::scalar_count() const {
    std::size_t n = 0;
    for (const auto& [name, m] : entries_) n += m.size();
    return n;
}

ParameterSet ParameterSet::zeros_like() const {
    ParameterSet out;
    for (const auto& [name, m] : entries_) out.add(name, Matrix(m.rows(), m.cols()));
    return out;
}

Var BoundParameters::operator[](std::string_view name) const {
    auto it = vars_.find(name);
    if (it == vars_.end()) throw ConfigError("parameter '" + std::string(name) + "' is not bound");
    return it->second;
}

// ---- Tape ------------------------------------------------------------------

Var Tape::constant(Matrix value) {
    Node n;
    n.value = std::move(value);
    nodes_.push_back(std::move(n));
    return Var{this, nodes_.size() - 1};
}

Var Tape::parameter(const std::string& name, Matrix value) {
    Node n;
    n.value = std::move(value);
    n.parameter_name = name;
    nodes_.push_back(std::move(n));
    return Var{this, nodes_.size() - 1};
}

BoundParameters Tape::bind(const ParameterSet& parameters) {
    BoundParameters out;
    for (const auto& [name, value] : parameters) out.insert(name, parameter(name, value));
    return out;
}

const Matrix& Tape::value(Var v) const {
    if (v.tape != this || v.id >= nodes_.size()) throw ContractError("variable does not belong to this tape");
    return nodes_[v.id].value;
}

std::size_t Tape::compute_node_count() const noexcept {
    return static_cast<std::size_t>(std::count_if(nodes_.begin(), nodes_.end(),
                                                  [](const Node& n) { return n.kind != OpKind::leaf; }));
}

Var Tape::record(OpKind kind, std::vector<std::size_t> inputs, Matrix value, NodeAux aux) {
    Node n;
    n.kind = kind;
    n.inputs = std::move(inputs);
    n.value = std::move(value);
    n.aux = std::move(aux);
    nodes_.push_back(std::move(n));
    return Var{this, nodes_.size() - 1};
}

void Tape::note_kinks(const std::vector<std::uint8_t>& pattern) {
    std::uint64_t h = kink_signature_ ^ (nodes_.size() * 0x9e3779b97f4a7c15ULL);
    for (std::uint8_t p : pattern) {
        h ^= p;
        h *= 0x100000001b3ULL;
    }
    kink_signature_ = h;
}

void Tape::accumulate(std::size_t id, const Matrix& g) {
    Matrix& slot = grads_[id];
    if (slot.empty() && nodes_[id].value.size() != 0) {
        slot = g;
        return;
    }
    kernels::add_inplace(slot, g);
}

void Tape::accumulate(std::size_t id, Matrix&& g) {
    Matrix& slot = grads_[id];
    if (slot.empty() && nodes_[id].value.size() != 0) {
        slot = std::move(g);
        return;
    }
    kernels::add_inplace(slot, g);
}

const Matrix& Tape::gradient(Var v) const {
    if (v.tape != this || v.id >= grads_.size()) throw ContractError("no gradient recorded for this variable");
    return grads_[v.id];
}

Gradients Tape::backpropagate(Var output, const Matrix& output_gradient) {
    const Matrix& out_value = value(output);
    if (!out_value.same_shape(output_gradient))
        throw ShapeError("backpropagate: output is " + out_value.shape_string() + " but gradient is " +
                         output_gradient.shape_string());
    grads_.assign(nodes_.size(), Matrix{});
    grads_[output.id] = output_gradient;

    for (std::size_t step = output.id + 1; step-- > 0;) {
        const Node& node = nodes_[step];
        if (node.kind == OpKind::leaf || grads_[step].empty()) continue;
        // inputs precede their consumer, so accumulate never touches this slot
        const Matrix& g = grads_[step];
        const auto& in = node.inputs;
        const Matrix& y = node.value;

        switch (node.kind) {
        case OpKind::leaf: break;
        case OpKind::matrix_multiply: {
            const Matrix& a = nodes_[in[0]].value;
            const Matrix& b = nodes_[in[1]].value;
            accumulate(in[0], kernels::matmul_nt(g, b));
            accumulate(in[1], kernels::matmul_tn(a, g));
            break;
        }
        case OpKind::transpose: accumulate(in[0], g.transposed()); break;
        case OpKind::add:
            accumulate(in[0], g);
            accumulate(in[1], g);
            break;
        case OpKind::subtract: {
            accumulate(in[0], g);
            Matrix neg = g;
            for (double& v : neg.values()) v = -v;
            accumulate(in[1], std::move(neg));
            break;
        }
        case OpKind::multiply: {
            const Matrix& a = nodes_[in[0]].value;
            const Matrix& b = nodes_[in[1]].value;
            Matrix ga(g.rows(), g.cols()), gb(g.rows(), g.cols());
            for (std::size_t i = 0; i < g.size(); ++i) {
                ga[i] = g[i] * b[i];
                gb[i] = g[i] * a[i];
            }
            accumulate(in[0], std::move(ga));
            accumulate(in[1], std::move(gb));
            break;
        }
        case OpKind::scale_by_constant: {
            Matrix ga = g;
            for (double& v : ga.values()) v *= node.aux.a;
            accumulate(in[0], std::move(ga));
            break;
        }
        case OpKind::offset_by_constant: accumulate(in[0], g); break;
        case OpKind::add_row_bias: {
            accumulate(in[0], g);
            Matrix gb(1, g.cols());
            for (std::size_t r = 0; r < g.rows(); ++r)
                for (std::size_t c = 0; c < g.cols(); ++c) gb(0, c) += g(r, c);
            accumulate(in[1], std::move(gb));
            break;
        }
        case OpKind::pointwise_relu: {
            const Matrix& x = nodes_[in[0]].value;
            Matrix ga(g.rows(), g.cols());
            for (std::size_t i = 0; i < g.size(); ++i) ga[i] = x[i] > 0.0 ? g[i] : 0.0;
            accumulate(in[0], std::move(ga));
            break;
        }
        case OpKind::ring_gather: {
            const auto& table = *node.aux.ring;
            const Matrix& x = nodes_[in[0]].value;
            const std::size_t c = x.cols();
            Matrix ga(x.rows(), c);
            for (std::size_t i = 0; i < table.size(); ++i) {
                const double* src = g.data() + i * c * icosphere::kRingWidth;
                for (std::size_t s = 0; s < icosphere::kRingWidth; ++s) {
                    double* dst = ga.data() + static_cast<std::size_t>(table[i][s]) * c;
                    for (std::size_t k = 0; k < c; ++k) dst[k] += src[s * c + k];
                }
            }
            accumulate(in[0], std::move(ga));
            break;
        }
        case OpKind::sparse_combine: accumulate(in[0], node.aux.sparse->apply_transpose(g)); break;
        case OpKind::row_sum: {
            const Matrix& x = nodes_[in[0]].value;
            Matrix ga(x.rows(), x.cols());
            for (std::size_t r = 0; r < x.rows(); ++r)
                for (std::size_t c = 0; c < x.cols(); ++c) ga(r, c) = g(r, 0);
            accumulate(in[0], std::move(ga));
            break;
        }
        case OpKind::row_mean_reduce: {
            const Matrix& x = nodes_[in[0]].value;
            Matrix ga(x.rows(), x.cols());
            const double inv = 1.0 / static_cast<double>(x.rows());
            for (std::size_t r = 0; r < x.rows(); ++r)
                for (std::size_t c = 0; c < x.cols(); ++c) ga(r, c) = g(0, c) * inv;
            accumulate(in[0], std::move(ga));
            break;
        }
        case OpKind::mean_all: {
            const Matrix& x = nodes_[in[0]].value;
            accumulate(in[0], Matrix(x.rows(), x.cols(), g(0, 0) / static_cast<double>(x.size())));
            break;
        }
        case OpKind::masked_sum: {
            Matrix ga = node.aux.mask;
            for (double& v : ga.values()) v *= g(0, 0);
            accumulate(in[0], std::move(ga));
            break;
        }
        case OpKind::softmax_row: {
            Matrix ga(y.rows(), y.cols());
            for (std::size_t r = 0; r < y.rows(); ++r) {
                double dot = 0.0;
                for (std::size_t c = 0; c < y.cols(); ++c) dot += g(r, c) * y(r, c);
                for (std::size_t c = 0; c < y.cols(); ++c) ga(r, c) = y(r, c) * (g(r, c) - dot);
            }
            accumulate(in[0], std::move(ga));
            break;
        }
        case OpKind::log_sum_exp_row: {
            const Matrix& p = node.aux.saved; // masked softmax weights
            Matrix ga(p.rows(), p.cols());
            for (std::size_t r = 0; r < p.rows(); ++r)
                for (std::size_t c = 0; c < p.cols(); ++c) ga(r, c) = g(r, 0) * p(r, c);
            accumulate(in[0], std::move(ga));
            break;
        }
        case OpKind::l2_normalize_row: {
            const Matrix& norms = node.aux.saved;
            Matrix ga(y.rows(), y.cols());
            for (std::size_t r = 0; r < y.rows(); ++r) {
                double dot = 0.0;
                for (std::size_t c = 0; c < y.cols(); ++c) dot += y(r, c) * g(r, c);
                for (std::size_t c = 0; c < y.cols(); ++c)
                    ga(r, c) = (g(r, c) - y(r, c) * dot) / norms(r, 0);
            }
            accumulate(in[0], std::move(ga));
            break;
        }
        case OpKind::clamp: {
            const Matrix& x = nodes_[in[0]].value;
            Matrix ga(x.rows(), x.cols());
            for (std::size_t i = 0; i < x.size(); ++i)
                ga[i] = (x[i] > node.aux.a && x[i] < node.aux.b) ? g[i] : 0.0;
            accumulate(in[0], std::move(ga));
            break;
        }
        case OpKind::mse:
        case OpKind::l1: {
            const Matrix& a = nodes_[in[0]].value;
            const Matrix& b = nodes_[in[1]].value;
            const Matrix& w = node.aux.mask;
            const double scale_factor = g(0, 0) / node.aux.a; // aux.a holds the weight total
            Matrix ga(a.rows(), a.cols());
            for (std::size_t i = 0; i < a.size(); ++i) {
                const double d = a[i] - b[i];
                const double dd = node.kind == OpKind::mse ? 2.0 * d : static_cast<double>((d > 0.0) - (d < 0.0));
                ga[i] = scale_factor * w[i] * dd;
            }
            Matrix gb = ga;
            for (double& v : gb.values()) v = -v;
            accumulate(in[0], std::move(ga));
            accumulate(in[1], std::move(gb));
            break;
        }
        case OpKind::concat_channels: {
            const Matrix& a = nodes_[in[0]].value;
            const Matrix& b = nodes_[in[1]].value;
            Matrix ga(a.rows(), a.cols()), gb(b.rows(), b.cols());
            for (std::size_t r = 0; r < g.rows(); ++r) {
                for (std::size_t c = 0; c < a.cols(); ++c) ga(r, c) = g(r, c);
                for (std::size_t c = 0; c < b.cols(); ++c) gb(r, c) = g(r, a.cols() + c);
            }
            accumulate(in[0], std::move(ga));
            accumulate(in[1], std::move(gb));
            break;
        }
        }
    }

    Gradients out;
    for (std::size_t i = 0; i < nodes_.size(); ++i) {
        const Node& n = nodes_[i];
        if (n.parameter_name.empty()) continue;
        if (grads_[i].empty()) grads_[i] = Matrix(n.value.rows(), n.value.cols());
        if (out.contains(n.parameter_name)) {
            kernels::add_inplace(out.at(n.parameter_name), grads_[i]);
        } else {
            out.add(n.parameter_name, grads_[i]);
        }
    }
    // Unreached nodes get explicit zeros so gradient() is total.
    for (std::size_t i = 0; i < nodes_.size(); ++i)
        if (grads_[i].empty()) grads_[i] = Matrix(nodes_[i].value.rows(), nodes_[i].value.cols());
    return out;
}

// ---- operations ------------------------------------------------------------

Var matmul(Var a, Var b) {
    Tape& t = same_tape(a, b, OpKind::matrix_multiply);
    const Matrix& x = a.value();
    const Matrix& y = b.value();
    if (x.cols() != y.rows()) shape_fail(OpKind::matrix_multiply, t, x.shape_string() + " * " + y.shape_string());
    return t.record(OpKind::matrix_multiply, {a.id, b.id}, kernels::matmul(x, y));
}

Var transpose(Var a) {
    Tape& t = tape_of(a, OpKind::transpose);
    return t.record(OpKind::transpose, {a.id}, a.value().transposed());
}

Var add(Var a, Var b) {
    Tape& t = same_tape(a, b, OpKind::add);
    require_same_shape(OpKind::add, t, a.value(), b.value());
    return t.record(OpKind::add, {a.id, b.id}, elementwise(a.value(), b.value(), [](double x, double y) { return x + y; }));
}

Var subtract(Var a, Var b) {
    Tape& t = same_tape(a, b, OpKind::subtract);
    require_same_shape(OpKind::subtract, t, a.value(), b.value());
    return t.record(OpKind::subtract, {a.id, b.id},
                    elementwise(a.value(), b.value(), [](double x, double y) { return x - y; }));
}

Var multiply(Var a, Var b) {
    Tape& t = same_tape(a, b, OpKind::multiply);
    require_same_shape(OpKind::multiply, t, a.value(), b.value());
    return t.record(OpKind::multiply, {a.id, b.id},
                    elementwise(a.value(), b.value(), [](double x, double y) { return x * y; }));
}

Var scale(Var a, double factor) {
    Tape& t = tape_of(a, OpKind::scale_by_constant);
    Matrix out = a.value();
    for (double& v : out.values()) v *= factor;
    NodeAux aux;
    aux.a = factor;
    return t.record(OpKind::scale_by_constant, {a.id}, std::move(out), std::move(aux));
}

Var offset(Var a, double constant) {
    Tape& t = tape_of(a, OpKind::offset_by_constant);
    Matrix out = a.value();
    for (double& v : out.values()) v += constant;
    NodeAux aux;
    aux.a = constant;
    return t.record(OpKind::offset_by_constant, {a.id}, std::move(out), std::move(aux));
}

Var add_row_bias(Var a, Var bias) {
    Tape& t = same_tape(a, bias, OpKind::add_row_bias);
    const Matrix& x = a.value();
    const Matrix& b = bias.value();
    if (b.rows() != 1 || b.cols() != x.cols())
        shape_fail(OpKind::add_row_bias, t, "bias " + b.shape_string() + " for " + x.shape_string());
    Matrix out = x;
    for (std::size_t r = 0; r < x.rows(); ++r)
        for (std::size_t c = 0; c < x.cols(); ++c) out(r, c) += b(0, c);
    return t.record(OpKind::add_row_bias, {a.id, bias.id}, std::move(out));
}

Var relu(Var a) {
    Tape& t = tape_of(a, OpKind::pointwise_relu);
    const Matrix& x = a.value();
    Matrix out(x.rows(), x.cols());
    for (std::size_t i = 0; i < x.size(); ++i) out[i] = x[i] > 0.0 ? x[i] : 0.0;
    if (t.tracking_kinks()) {
        std::vector<std::uint8_t> pattern(x.size());
        for (std::size_t i = 0; i < x.size(); ++i) pattern[i] = x[i] > 0.0;
        t.note_kinks(pattern);
    }
    return t.record(OpKind::pointwise_relu, {a.id}, std::move(out));
}

Var ring_gather(Var a, const std::vector<icosphere::NeighborRow>& table) {
    Tape& t = tape_of(a, OpKind::ring_gather);
    const Matrix& x = a.value();
    if (x.rows() != table.size())
        shape_fail(OpKind::ring_gather, t,
                   "input has " + std::to_string(x.rows()) + " rows, table " + std::to_string(table.size()));
    const std::size_t c = x.cols();
    Matrix out(x.rows(), c * icosphere::kRingWidth);
    for (std::size_t i = 0; i < table.size(); ++i) {
        double* dst = out.data() + i * c * icosphere::kRingWidth;
        for (std::size_t s = 0; s < icosphere::kRingWidth; ++s) {
            const double* src = x.data() + static_cast<std::size_t>(table[i][s]) * c;
            std::copy(src, src + c, dst + s * c);
        }
    }
    NodeAux aux;
    aux.ring = &table;
    return t.record(OpKind::ring_gather, {a.id}, std::move(out), std::move(aux));
}

Var sparse_combine(Var a, const SparseRows& op) {
    Tape& t = tape_of(a, OpKind::sparse_combine);
    if (a.rows() != op.input_rows)
        shape_fail(OpKind::sparse_combine, t,
                   "input has " + std::to_string(a.rows()) + " rows, operator expects " + std::to_string(op.input_rows));
    NodeAux aux;
    aux.sparse = &op;
    return t.record(OpKind::sparse_combine, {a.id}, op.apply(a.value()), std::move(aux));
}

Var sparse_combine(Var a, std::shared_ptr<const SparseRows> op) {
    Tape& t = tape_of(a, OpKind::sparse_combine);
    if (!op) throw ContractError("sparse_combine: null operator");
    if (a.rows() != op->input_rows)
        shape_fail(OpKind::sparse_combine, t,
                   "input has " + std::to_string(a.rows()) + " rows, operator expects " + std::to_string(op->input_rows));
    NodeAux aux;
    aux.sparse = op.get();
    Matrix out = op->apply(a.value());
    aux.owned_sparse = std::move(op);
    return t.record(OpKind::sparse_combine, {a.id}, std::move(out), std::move(aux));
}

Var row_sum(Var a) {
    Tape& t = tape_of(a, OpKind::row_sum);
    const Matrix& x = a.value();
    Matrix out(x.rows(), 1);
    for (std::size_t r = 0; r < x.rows(); ++r)
        for (std::size_t c = 0; c < x.cols(); ++c) out(r, 0) += x(r, c);
    return t.record(OpKind::row_sum, {a.id}, std::move(out));
}

Var row_mean_reduce(Var a) {
    Tape& t = tape_of(a, OpKind::row_mean_reduce);
    const Matrix& x = a.value();
    if (x.rows() == 0) shape_fail(OpKind::row_mean_reduce, t, "no rows to average");
    Matrix out(1, x.cols());
    for (std::size_t r = 0; r < x.rows(); ++r)
        for (std::size_t c = 0; c < x.cols(); ++c) out(0, c) += x(r, c);
    for (double& v : out.values()) v /= static_cast<double>(x.rows());
    return t.record(OpKind::row_mean_reduce, {a.id}, std::move(out));
}

Var mean_all(Var a) {
    Tape& t = tape_of(a, OpKind::mean_all);
    const Matrix& x = a.value();
    if (x.size() == 0) shape_fail(OpKind::mean_all, t, "empty input");
    double sum = 0.0;
    for (double v : x.values()) sum += v;
    return t.record(OpKind::mean_all, {a.id}, Matrix::scalar(sum / static_cast<double>(x.size())));
}

Var masked_sum(Var a, const Matrix& mask) {
    Tape& t = tape_of(a, OpKind::masked_sum);
    require_same_shape(OpKind::masked_sum, t, a.value(), mask);
    double sum = 0.0;
    const Matrix& x = a.value();
    for (std::size_t i = 0; i < x.size(); ++i) sum += mask[i] * x[i];
    NodeAux aux;
    aux.mask = mask;
    return t.record(OpKind::masked_sum, {a.id}, Matrix::scalar(sum), std::move(aux));
}

Var softmax_row(Var a) {
    Tape& t = tape_of(a, OpKind::softmax_row);
    const Matrix& x = a.value();
    Matrix out(x.rows(), x.cols());
    for (std::size_t r = 0; r < x.rows(); ++r) {
        const auto row = x.row(r);
        const double m = *std::max_element(row.begin(), row.end());
        double sum = 0.0;
        for (std::size_t c = 0; c < x.cols(); ++c) sum += (out(r, c) = std::exp(x(r, c) - m));
        for (std::size_t c = 0; c < x.cols(); ++c) out(r, c) /= sum;
    }
    return t.record(OpKind::softmax_row, {a.id}, std::move(out));
}

namespace {

Var log_sum_exp_impl(Var a, const Matrix* mask) {
    Tape& t = tape_of(a, OpKind::log_sum_exp_row);
    const Matrix& x = a.value();
    if (mask != nullptr) require_same_shape(OpKind::log_sum_exp_row, t, x, *mask);
    Matrix out(x.rows(), 1);
    NodeAux aux;
    aux.saved = Matrix(x.rows(), x.cols());
    for (std::size_t r = 0; r < x.rows(); ++r) {
        double m = -std::numeric_limits<double>::infinity();
        for (std::size_t c = 0; c < x.cols(); ++c)
            if (mask == nullptr || (*mask)(r, c) != 0.0) m = std::max(m, x(r, c));
        if (m == -std::numeric_limits<double>::infinity())
            throw MaskError("log_sum_exp_row: row " + std::to_string(r) + " has no unmasked entries");
        double sum = 0.0;
        for (std::size_t c = 0; c < x.cols(); ++c) {
            if (mask != nullptr && (*mask)(r, c) == 0.0) continue;
            sum += (aux.saved(r, c) = std::exp(x(r, c) - m));
        }
        for (std::size_t c = 0; c < x.cols(); ++c) aux.saved(r, c) /= sum;
        out(r, 0) = m + std::log(sum);
    }
    return t.record(OpKind::log_sum_exp_row, {a.id}, std::move(out), std::move(aux));
}

} // namespace

Var log_sum_exp_row(Var a) { return log_sum_exp_impl(a, nullptr); }
Var log_sum_exp_row(Var a, const Matrix& mask) { return log_sum_exp_impl(a, &mask); }

Var l2_normalize_row(Var a) {
    Tape& t = tape_of(a, OpKind::l2_normalize_row);
    const Matrix& x = a.value();
    Matrix out(x.rows(), x.cols());
    NodeAux aux;
    aux.saved = Matrix(x.rows(), 1);
    for (std::size_t r = 0; r < x.rows(); ++r) {
        double sq = 0.0;
        for (double v : x.row(r)) sq += v * v;
        const double n = std::sqrt(sq);
        if (!(n > 0.0)) throw NormalizationError("l2_normalize_row: row " + std::to_string(r) + " has zero norm");
        aux.saved(r, 0) = n;
        for (std::size_t c = 0; c < x.cols(); ++c) out(r, c) = x(r, c) / n;
    }
    return t.record(OpKind::l2_normalize_row, {a.id}, std::move(out), std::move(aux));
}

Var clamp(Var a, double lo, double hi) {
    Tape& t = tape_of(a, OpKind::clamp);
    if (!(lo <= hi)) throw ParameterError("clamp: lower bound exceeds upper bound");
    const Matrix& x = a.value();
    Matrix out(x.rows(), x.cols());
    for (std::size_t i = 0; i < x.size(); ++i) out[i] = std::clamp(x[i], lo, hi);
    if (t.tracking_kinks()) {
        std::vector<std::uint8_t> pattern(x.size());
        for (std::size_t i = 0; i < x.size(); ++i)
            pattern[i] = x[i] <= lo ? 0 : (x[i] >= hi ? 2 : 1);
        t.note_kinks(pattern);
    }
    NodeAux aux;
    aux.a = lo;
    aux.b = hi;
    return t.record(OpKind::clamp, {a.id}, std::move(out), std::move(aux));
}

namespace {

Var difference_loss(OpKind kind, Var a, Var b, const Matrix& weights) {
    Tape& t = same_tape(a, b, kind);
    const Matrix& x = a.value();
    const Matrix& y = b.value();
    require_same_shape(kind, t, x, y);
    NodeAux aux;
    aux.mask = expand_weights(kind, t, x, weights);
    double total = 0.0;
    double sum = 0.0;
    std::vector<std::uint8_t> pattern;
    if (kind == OpKind::l1 && t.tracking_kinks()) pattern.resize(x.size());
    for (std::size_t i = 0; i < x.size(); ++i) {
        const double w = aux.mask[i];
        const double d = x[i] - y[i];
        total += w;
        sum += kind == OpKind::mse ? w * d * d : w * std::abs(d);
        if (!pattern.empty()) pattern[i] = static_cast<std::uint8_t>((d > 0.0) - (d < 0.0) + 1);
    }
    if (!(total > 0.0)) throw DegenerateMaskError(std::string(op_name(kind)) + ": weights sum to zero");
    if (!pattern.empty()) t.note_kinks(pattern);
    aux.a = total;
    return t.record(kind, {a.id, b.id}, Matrix::scalar(sum / total), std::move(aux));
}

} // namespace

Var mse(Var a, Var b, const Matrix& weights) { return difference_loss(OpKind::mse, a, b, weights); }
Var l1(Var a, Var b, const Matrix& weights) { return difference_loss(OpKind::l1, a, b, weights); }

Var concat_channels(Var a, Var b) {
    Tape& t = same_tape(a, b, OpKind::concat_channels);
    const Matrix& x = a.value();
    const Matrix& y = b.value();
    if (x.rows() != y.rows())
        shape_fail(OpKind::concat_channels, t, x.shape_string() + " beside " + y.shape_string());
    Matrix out(x.rows(), x.cols() + y.cols());
    for (std::size_t r = 0; r < x.rows(); ++r) {
        std::copy(x.row(r).begin(), x.row(r).end(), out.row(r).begin());
        std::copy(y.row(r).begin(), y.row(r).end(), out.row(r).begin() + static_cast<std::ptrdiff_t>(x.cols()));
    }
    return t.record(OpKind::concat_channels, {a.id, b.id}, std::move(out));
}

// ---- tracing and verification ---------------------------------------------

Trace trace_forward(const Program& program, const ParameterSet& parameters) {
    Trace trace;
    trace.tape = std::make_unique<Tape>();
    const BoundParameters bound = trace.tape->bind(parameters);
    trace.output = program(*trace.tape, bound);
    return trace;
}

namespace {

struct Probe {
    double value;
    std::uint64_t signature;
};

Probe evaluate(const Program& program, const ParameterSet& parameters) {
    Tape tape;
    tape.set_track_kinks(true);
    const BoundParameters bound = tape.bind(parameters);
    const Var out = program(tape, bound);
    return {out.value()(0, 0), tape.kink_signature()};
}

} // namespace

FiniteDifferenceReport finite_difference_check(const Program& program, const ParameterSet& parameters,
                                               const FiniteDifferenceOptions& options) {
    FiniteDifferenceReport report;
    report.tolerance = options.tolerance;

    Tape tape;
    tape.set_track_kinks(true);
    const BoundParameters bound = tape.bind(parameters);
    const Var out = program(tape, bound);
    if (out.rows() != 1 || out.cols() != 1)
        throw ContractError("finite_difference_check needs a scalar program, got " + out.value().shape_string());
    for (double v : out.value().values())
        if (!std::isfinite(v)) throw NumericError("finite_difference_check: non-finite program value");
    const std::uint64_t base_signature = tape.kink_signature();
    const Gradients analytic = tape.backpropagate(out);

    ParameterSet work = parameters;
    const Rng sampler(options.seed);
    const double h = options.step;
    for (auto& [name, value] : work) {
        std::vector<std::size_t> entries(value.size());
        std::iota(entries.begin(), entries.end(), std::size_t{0});
        if (options.max_entries_per_parameter != 0 && entries.size() > options.max_entries_per_parameter) {
            Rng pick = sampler.split(name);
            // Partial Fisher-Yates: the first k slots become a uniform sample.
            for (std::size_t k = 0; k < options.max_entries_per_parameter; ++k) {
                const std::size_t j = k + pick.below(entries.size() - k);
                std::swap(entries[k], entries[j]);
            }
            entries.resize(options.max_entries_per_parameter);
            std::sort(entries.begin(), entries.end());
        }
        const Matrix& grad = analytic.at(name);
        for (std::size_t idx : entries) {
            const double original = value[idx];
            value[idx] = original + h;
            const Probe plus = evaluate(program, work);
            value[idx] = original - h;
            const Probe minus = evaluate(program, work);
            value[idx] = original;
            if (plus.signature != base_signature || minus.signature != base_signature) {
                ++report.kink_excluded;
                continue;
            }
            const double numeric = (plus.value - minus.value) / (2.0 * h);
            const double a = grad[idx];
            const double denom = std::max({std::abs(a), std::abs(numeric), options.denominator_floor});
            const double rel = std::abs(a - numeric) / denom;
            ++report.checked;
            if (rel > report.max_rel_error || report.worst_parameter.empty()) {
                if (rel >= report.max_rel_error) {
                    report.max_rel_error = rel;
                    report.worst_parameter = name;
                    report.worst_index = idx;
                }
            }
        }
    }
    report.passed = report.max_rel_error < options.tolerance;
    return report;
}

} // namespace cortisphere::num
