#include "wqtrust/ndcore.hpp"

#include "wqtrust/error.hpp"

#include <Eigen/Core>

#include <algorithm>
#include <cmath>
#include <numeric>
#include <sstream>
#include <unordered_set>

namespace wqt::nd {

namespace detail {

struct Node {
    Shape shape;
    std::vector<double> value;
    std::vector<double> grad;
    bool requires_grad = false;
    std::vector<std::shared_ptr<Node>> parents;
    std::function<void(Node&)> backward_fn;

    bool is_leaf() const { return !backward_fn; }

    void ensure_grad() {
        if (grad.size() != value.size()) grad.assign(value.size(), 0.0);
    }

    // Long recurrent chains would otherwise tear down recursively.
    ~Node() {
        std::vector<std::shared_ptr<Node>> pending;
        pending.swap(parents);
        while (!pending.empty()) {
            auto n = std::move(pending.back());
            pending.pop_back();
            if (n && n.use_count() == 1) {
                for (auto& p : n->parents) pending.push_back(std::move(p));
                n->parents.clear();
            }
        }
    }
};

} // namespace detail

using detail::Node;
using NodePtr = std::shared_ptr<Node>;

struct TensorAccess {
    static const NodePtr& node(const Tensor& t) { return t.node_; }
    static Tensor wrap(NodePtr n) { return Tensor(std::move(n)); }
};

namespace {

thread_local bool t_grad_enabled = true;

std::string shape_str(const Shape& s) {
    std::ostringstream os;
    os << '[';
    for (std::size_t i = 0; i < s.size(); ++i) os << (i ? "x" : "") << s[i];
    os << ']';
    return os.str();
}

const NodePtr& node_of(const Tensor& t) {
    const auto& n = TensorAccess::node(t);
    if (!n) throw ContractError("use of an undefined tensor");
    return n;
}

Tensor make_leaf(Shape shape, std::vector<double> value, bool requires_grad) {
    if (numel_of(shape) != value.size()) {
        throw DimensionError("shape " + shape_str(shape) + " holds " +
                             std::to_string(numel_of(shape)) + " values, got " +
                             std::to_string(value.size()));
    }
    auto n = std::make_shared<Node>();
    n->shape = std::move(shape);
    n->value = std::move(value);
    n->requires_grad = requires_grad;
    return TensorAccess::wrap(std::move(n));
}

// Creates an op result; the closure is kept only when some input needs grads.
Tensor make_result(Shape shape, std::vector<double> value, std::vector<NodePtr> parents,
                   std::function<void(Node&)> fn) {
    auto n = std::make_shared<Node>();
    n->shape = std::move(shape);
    n->value = std::move(value);
    const bool track = t_grad_enabled &&
                       std::any_of(parents.begin(), parents.end(),
                                   [](const NodePtr& p) { return p->requires_grad; });
    if (track) {
        n->requires_grad = true;
        n->parents = std::move(parents);
        n->backward_fn = std::move(fn);
    }
    return TensorAccess::wrap(std::move(n));
}

struct AxisSplit {
    std::size_t outer = 1, dim = 1, inner = 1;
};

AxisSplit split_at(const Shape& s, std::size_t axis) {
    if (axis >= s.size()) {
        throw DimensionError("axis " + std::to_string(axis) + " out of range for " + shape_str(s));
    }
    AxisSplit r;
    for (std::size_t i = 0; i < axis; ++i) r.outer *= s[i];
    r.dim = s[axis];
    for (std::size_t i = axis + 1; i < s.size(); ++i) r.inner *= s[i];
    return r;
}

double gelu_value(double x) {
    constexpr double c = 0.7978845608028654; // sqrt(2/pi)
    return 0.5 * x * (1.0 + std::tanh(c * (x + kGeluCubic * x * x * x)));
}

double gelu_deriv(double x) {
    constexpr double c = 0.7978845608028654;
    const double u = c * (x + kGeluCubic * x * x * x);
    const double t = std::tanh(u);
    return 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * c * (1.0 + 3.0 * kGeluCubic * x * x);
}

Tensor unary(const Tensor& a, double (*f)(double, double), double (*df)(double, double, double),
             double param = 0.0) {
    const auto& an = node_of(a);
    std::vector<double> out(an->value.size());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = f(an->value[i], param);
    return make_result(an->shape, std::move(out), {an}, [df, param](Node& self) {
        auto& p = *self.parents[0];
        if (!p.requires_grad) return;
        p.ensure_grad();
        for (std::size_t i = 0; i < self.grad.size(); ++i) {
            p.grad[i] += self.grad[i] * df(p.value[i], self.value[i], param);
        }
    });
}

} // namespace

std::size_t numel_of(const Shape& shape) {
    return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

// ---------------------------------------------------------------- Tensor

Tensor::Tensor(Shape shape, std::vector<double> data, bool requires_grad)
    : Tensor(make_leaf(std::move(shape), std::move(data), requires_grad)) {}

Tensor Tensor::zeros(Shape shape, bool requires_grad) {
    const auto n = numel_of(shape);
    return Tensor(std::move(shape), std::vector<double>(n, 0.0), requires_grad);
}

Tensor Tensor::full(Shape shape, double value, bool requires_grad) {
    const auto n = numel_of(shape);
    return Tensor(std::move(shape), std::vector<double>(n, value), requires_grad);
}

Tensor Tensor::scalar(double value, bool requires_grad) {
    return Tensor(Shape{}, {value}, requires_grad);
}

Tensor Tensor::vector(std::vector<double> data, bool requires_grad) {
    const auto n = data.size();
    return Tensor(Shape{n}, std::move(data), requires_grad);
}

Tensor Tensor::matrix(std::size_t rows, std::size_t cols, std::vector<double> data,
                      bool requires_grad) {
    return Tensor(Shape{rows, cols}, std::move(data), requires_grad);
}

Tensor Tensor::identity(std::size_t n) {
    std::vector<double> d(n * n, 0.0);
    for (std::size_t i = 0; i < n; ++i) d[i * n + i] = 1.0;
    return matrix(n, n, std::move(d));
}

const Shape& Tensor::shape() const { return node_of(*this)->shape; }

std::size_t Tensor::dim(std::size_t axis) const {
    const auto& s = shape();
    if (axis >= s.size()) throw DimensionError("axis out of range for " + shape_str(s));
    return s[axis];
}

std::size_t Tensor::numel() const { return node_of(*this)->value.size(); }

std::span<const double> Tensor::data() const { return node_of(*this)->value; }

double Tensor::item() const {
    const auto& n = node_of(*this);
    if (n->value.size() != 1) throw DimensionError("item() on tensor " + shape_str(n->shape));
    return n->value[0];
}

bool Tensor::requires_grad() const { return node_of(*this)->requires_grad; }
bool Tensor::is_leaf() const { return node_of(*this)->is_leaf(); }
bool Tensor::has_grad() const { return !node_of(*this)->grad.empty(); }
std::span<const double> Tensor::grad() const { return node_of(*this)->grad; }

void Tensor::zero_grad() {
    auto& n = *node_of(*this);
    std::fill(n.grad.begin(), n.grad.end(), 0.0);
}

std::span<double> Tensor::mutable_data() {
    auto& n = *node_of(*this);
    if (!n.is_leaf()) throw ContractError("mutable_data() on a recorded (non-leaf) tensor");
    return n.value;
}

Tensor Tensor::detach(bool requires_grad) const {
    const auto& n = node_of(*this);
    return Tensor(n->shape, n->value, requires_grad);
}

// ---------------------------------------------------------------- Tape

Tape Tape::record(const Tensor& root) {
    Tape tape;
    tape.root_ = root;
    const auto& r = node_of(root);
    if (!r->requires_grad) return tape;
    std::unordered_set<const Node*> seen;
    // Iterative post-order DFS: inputs are emitted before their consumers.
    std::vector<std::pair<Node*, std::size_t>> stack{{r.get(), 0}};
    seen.insert(r.get());
    while (!stack.empty()) {
        auto& [n, next] = stack.back();
        if (next < n->parents.size()) {
            Node* p = n->parents[next++].get();
            if (p->requires_grad && seen.insert(p).second) stack.emplace_back(p, 0);
        } else {
            tape.order_.push_back(n);
            stack.pop_back();
        }
    }
    return tape;
}

void Tape::backward() {
    if (order_.empty()) return;
    for (Node* n : order_) {
        if (!n->is_leaf()) n->grad.assign(n->value.size(), 0.0);
    }
    Node* root = order_.back();
    root->ensure_grad();
    root->grad[0] += 1.0;
    for (auto it = order_.rbegin(); it != order_.rend(); ++it) {
        Node* n = *it;
        if (!n->is_leaf()) n->backward_fn(*n);
    }
}

void backward(const Tensor& loss) {
    if (loss.numel() != 1) {
        throw ContractError("backward() needs a scalar loss, got " + shape_str(loss.shape()));
    }
    Tape::record(loss).backward();
}

NoGradGuard::NoGradGuard() : previous_(t_grad_enabled) { t_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { t_grad_enabled = previous_; }
bool grad_enabled() { return t_grad_enabled; }

// ---------------------------------------------------------------- elementwise

namespace {

enum class BinOp { Add, Sub, Mul, Div };

Tensor binary(BinOp op, const Tensor& a, const Tensor& b) {
    const auto& an = node_of(a);
    const auto& bn = node_of(b);
    const std::size_t na = an->value.size(), nb = bn->value.size();
    Shape shape;
    if (an->shape == bn->shape || (na == nb && na == 1)) {
        shape = an->shape.size() >= bn->shape.size() ? an->shape : bn->shape;
    } else if (nb == 1) {
        shape = an->shape;
    } else if (na == 1) {
        shape = bn->shape;
    } else {
        throw DimensionError("elementwise shapes " + shape_str(an->shape) + " and " +
                             shape_str(bn->shape) + " are not compatible");
    }
    const std::size_t n = numel_of(shape);
    const bool sa = na == 1 && n != 1, sb = nb == 1 && n != 1;
    auto A = [&](std::size_t i) { return an->value[sa ? 0 : i]; };
    auto B = [&](std::size_t i) { return bn->value[sb ? 0 : i]; };
    std::vector<double> out(n);
    for (std::size_t i = 0; i < n; ++i) {
        switch (op) {
        case BinOp::Add: out[i] = A(i) + B(i); break;
        case BinOp::Sub: out[i] = A(i) - B(i); break;
        case BinOp::Mul: out[i] = A(i) * B(i); break;
        case BinOp::Div:
            if (B(i) == 0.0) throw DomainError("division by zero");
            out[i] = A(i) / B(i);
            break;
        }
    }
    return make_result(std::move(shape), std::move(out), {an, bn}, [op, sa, sb](Node& self) {
        Node& pa = *self.parents[0];
        Node& pb = *self.parents[1];
        const std::size_t n = self.grad.size();
        if (pa.requires_grad) pa.ensure_grad();
        if (pb.requires_grad) pb.ensure_grad();
        for (std::size_t i = 0; i < n; ++i) {
            const double g = self.grad[i];
            const double av = pa.value[sa ? 0 : i];
            const double bv = pb.value[sb ? 0 : i];
            double ga = 0.0, gb = 0.0;
            switch (op) {
            case BinOp::Add: ga = g; gb = g; break;
            case BinOp::Sub: ga = g; gb = -g; break;
            case BinOp::Mul: ga = g * bv; gb = g * av; break;
            case BinOp::Div: ga = g / bv; gb = -g * av / (bv * bv); break;
            }
            if (pa.requires_grad) pa.grad[sa ? 0 : i] += ga;
            if (pb.requires_grad) pb.grad[sb ? 0 : i] += gb;
        }
    });
}

} // namespace

Tensor add(const Tensor& a, const Tensor& b) { return binary(BinOp::Add, a, b); }
Tensor sub(const Tensor& a, const Tensor& b) { return binary(BinOp::Sub, a, b); }
Tensor mul(const Tensor& a, const Tensor& b) { return binary(BinOp::Mul, a, b); }
Tensor div(const Tensor& a, const Tensor& b) { return binary(BinOp::Div, a, b); }

Tensor exp(const Tensor& a) {
    return unary(
        a, [](double x, double) { return std::exp(x); },
        [](double, double y, double) { return y; });
}

Tensor log(const Tensor& a) {
    for (double v : a.data()) {
        if (!(v > 0.0)) throw DomainError("log of non-positive value " + std::to_string(v));
    }
    return unary(
        a, [](double x, double) { return std::log(x); },
        [](double x, double, double) { return 1.0 / x; });
}

Tensor tanh(const Tensor& a) {
    return unary(
        a, [](double x, double) { return std::tanh(x); },
        [](double, double y, double) { return 1.0 - y * y; });
}

Tensor sigmoid(const Tensor& a) {
    return unary(
        a,
        [](double x, double) {
            return x >= 0 ? 1.0 / (1.0 + std::exp(-x)) : std::exp(x) / (1.0 + std::exp(x));
        },
        [](double, double y, double) { return y * (1.0 - y); });
}

Tensor gelu(const Tensor& a) {
    return unary(
        a, [](double x, double) { return gelu_value(x); },
        [](double x, double, double) { return gelu_deriv(x); });
}

Tensor leaky_relu(const Tensor& a, double slope) {
    return unary(
        a, [](double x, double s) { return x >= 0 ? x : s * x; },
        [](double x, double, double s) { return x >= 0 ? 1.0 : s; }, slope);
}

Tensor scale(const Tensor& a, double factor) {
    return unary(
        a, [](double x, double f) { return x * f; },
        [](double, double, double f) { return f; }, factor);
}

Tensor add_scalar(const Tensor& a, double value) {
    return unary(
        a, [](double x, double v) { return x + v; },
        [](double, double, double) { return 1.0; }, value);
}

Tensor elementwise(Elementwise op, const Tensor& a) {
    switch (op) {
    case Elementwise::Exp: return exp(a);
    case Elementwise::Log: return log(a);
    case Elementwise::Tanh: return tanh(a);
    case Elementwise::Sigmoid: return sigmoid(a);
    case Elementwise::Gelu: return gelu(a);
    case Elementwise::LeakyRelu: return leaky_relu(a);
    default: throw ContractError("binary elementwise op called with one operand");
    }
}

Tensor elementwise(Elementwise op, const Tensor& a, const Tensor& b) {
    switch (op) {
    case Elementwise::Add: return add(a, b);
    case Elementwise::Sub: return sub(a, b);
    case Elementwise::Mul: return mul(a, b);
    case Elementwise::Div: return div(a, b);
    default: throw ContractError("unary elementwise op called with two operands");
    }
}

// ---------------------------------------------------------------- products

namespace {

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using CMap = Eigen::Map<const RowMat>;
using MMap = Eigen::Map<RowMat>;

// C[m x n] += A[m x k] * B[k x n]
void gemm_nn(const double* A, const double* B, double* C, std::size_t m, std::size_t k,
             std::size_t n) {
    const auto M = static_cast<Eigen::Index>(m), K = static_cast<Eigen::Index>(k), N = static_cast<Eigen::Index>(n);
    MMap(C, M, N).noalias() += CMap(A, M, K) * CMap(B, K, N);
}

// dA[m x k] += dC[m x n] * B[k x n]^T
void gemm_nt(const double* dC, const double* B, double* dA, std::size_t m, std::size_t k,
             std::size_t n) {
    const auto M = static_cast<Eigen::Index>(m), K = static_cast<Eigen::Index>(k), N = static_cast<Eigen::Index>(n);
    MMap(dA, M, K).noalias() += CMap(dC, M, N) * CMap(B, K, N).transpose();
}

// dB[k x n] += A[m x k]^T * dC[m x n]
void gemm_tn(const double* A, const double* dC, double* dB, std::size_t m, std::size_t k,
             std::size_t n) {
    const auto M = static_cast<Eigen::Index>(m), K = static_cast<Eigen::Index>(k), N = static_cast<Eigen::Index>(n);
    MMap(dB, K, N).noalias() += CMap(A, M, K).transpose() * CMap(dC, M, N);
}

} // namespace

Tensor matmul(const Tensor& a, const Tensor& b) {
    const auto& an = node_of(a);
    const auto& bn = node_of(b);
    if (an->shape.size() != 2 || bn->shape.size() != 2 || an->shape[1] != bn->shape[0]) {
        throw DimensionError("matmul of " + shape_str(an->shape) + " and " + shape_str(bn->shape));
    }
    const std::size_t m = an->shape[0], k = an->shape[1], n = bn->shape[1];
    std::vector<double> out(m * n, 0.0);
    gemm_nn(an->value.data(), bn->value.data(), out.data(), m, k, n);
    return make_result(Shape{m, n}, std::move(out), {an, bn}, [m, k, n](Node& self) {
        Node& pa = *self.parents[0];
        Node& pb = *self.parents[1];
        if (pa.requires_grad) {
            pa.ensure_grad();
            gemm_nt(self.grad.data(), pb.value.data(), pa.grad.data(), m, k, n);
        }
        if (pb.requires_grad) {
            pb.ensure_grad();
            gemm_tn(pa.value.data(), self.grad.data(), pb.grad.data(), m, k, n);
        }
    });
}

Tensor bmm(const Tensor& a, const Tensor& b) {
    const auto& an = node_of(a);
    const auto& bn = node_of(b);
    if (an->shape.size() != 3 || bn->shape.size() != 3 || an->shape[0] != bn->shape[0] ||
        an->shape[2] != bn->shape[1]) {
        throw DimensionError("bmm of " + shape_str(an->shape) + " and " + shape_str(bn->shape));
    }
    const std::size_t B = an->shape[0], m = an->shape[1], k = an->shape[2], n = bn->shape[2];
    std::vector<double> out(B * m * n, 0.0);
    for (std::size_t s = 0; s < B; ++s) {
        gemm_nn(an->value.data() + s * m * k, bn->value.data() + s * k * n, out.data() + s * m * n,
                m, k, n);
    }
    return make_result(Shape{B, m, n}, std::move(out), {an, bn}, [B, m, k, n](Node& self) {
        Node& pa = *self.parents[0];
        Node& pb = *self.parents[1];
        if (pa.requires_grad) pa.ensure_grad();
        if (pb.requires_grad) pb.ensure_grad();
        for (std::size_t s = 0; s < B; ++s) {
            const double* g = self.grad.data() + s * m * n;
            if (pa.requires_grad) {
                gemm_nt(g, pb.value.data() + s * k * n, pa.grad.data() + s * m * k, m, k, n);
            }
            if (pb.requires_grad) {
                gemm_tn(pa.value.data() + s * m * k, g, pb.grad.data() + s * k * n, m, k, n);
            }
        }
    });
}

// ---------------------------------------------------------------- layout

Tensor permute(const Tensor& a, const std::vector<std::size_t>& axes) {
    const auto& an = node_of(a);
    const std::size_t r = an->shape.size();
    if (axes.size() != r) throw DimensionError("permute needs one axis per dimension");
    std::vector<bool> used(r, false);
    for (auto ax : axes) {
        if (ax >= r || used[ax]) throw DimensionError("permute axes are not a permutation");
        used[ax] = true;
    }
    Shape out_shape(r);
    for (std::size_t i = 0; i < r; ++i) out_shape[i] = an->shape[axes[i]];
    std::vector<std::size_t> in_stride(r, 1);
    for (std::size_t i = r; i-- > 1;) in_stride[i - 1] = in_stride[i] * an->shape[i];
    const std::size_t n = an->value.size();
    // map[out_index] = in_index
    auto map = std::make_shared<std::vector<std::size_t>>(n);
    std::vector<std::size_t> idx(r, 0);
    for (std::size_t o = 0; o < n; ++o) {
        std::size_t in = 0;
        for (std::size_t d = 0; d < r; ++d) in += idx[d] * in_stride[axes[d]];
        (*map)[o] = in;
        for (std::size_t d = r; d-- > 0;) {
            if (++idx[d] < out_shape[d]) break;
            idx[d] = 0;
        }
    }
    std::vector<double> out(n);
    for (std::size_t o = 0; o < n; ++o) out[o] = an->value[(*map)[o]];
    return make_result(std::move(out_shape), std::move(out), {an}, [map](Node& self) {
        Node& p = *self.parents[0];
        p.ensure_grad();
        for (std::size_t o = 0; o < self.grad.size(); ++o) p.grad[(*map)[o]] += self.grad[o];
    });
}

Tensor transpose(const Tensor& a) {
    if (a.rank() != 2) throw DimensionError("transpose needs a matrix");
    return permute(a, {1, 0});
}

Tensor reshape(const Tensor& a, Shape shape) {
    const auto& an = node_of(a);
    if (numel_of(shape) != an->value.size()) {
        throw DimensionError("cannot reshape " + shape_str(an->shape) + " to " + shape_str(shape));
    }
    return make_result(std::move(shape), an->value, {an}, [](Node& self) {
        Node& p = *self.parents[0];
        p.ensure_grad();
        for (std::size_t i = 0; i < self.grad.size(); ++i) p.grad[i] += self.grad[i];
    });
}

namespace {

Tensor rowwise(const Tensor& x, const Tensor& v, bool multiply) {
    const auto& xn = node_of(x);
    const auto& vn = node_of(v);
    if (xn->shape.empty() || vn->value.size() != xn->shape.back()) {
        throw DimensionError("row-broadcast of " + shape_str(vn->shape) + " over " +
                             shape_str(xn->shape));
    }
    const std::size_t n = xn->shape.back();
    const std::size_t rows = xn->value.size() / n;
    std::vector<double> out(xn->value.size());
    for (std::size_t r = 0; r < rows; ++r) {
        for (std::size_t j = 0; j < n; ++j) {
            const double a = xn->value[r * n + j];
            out[r * n + j] = multiply ? a * vn->value[j] : a + vn->value[j];
        }
    }
    return make_result(xn->shape, std::move(out), {xn, vn}, [n, rows, multiply](Node& self) {
        Node& px = *self.parents[0];
        Node& pv = *self.parents[1];
        if (px.requires_grad) px.ensure_grad();
        if (pv.requires_grad) pv.ensure_grad();
        for (std::size_t r = 0; r < rows; ++r) {
            for (std::size_t j = 0; j < n; ++j) {
                const double g = self.grad[r * n + j];
                if (px.requires_grad) px.grad[r * n + j] += multiply ? g * pv.value[j] : g;
                if (pv.requires_grad) pv.grad[j] += multiply ? g * px.value[r * n + j] : g;
            }
        }
    });
}

} // namespace

Tensor add_bias(const Tensor& x, const Tensor& bias) { return rowwise(x, bias, false); }
Tensor mul_cols(const Tensor& x, const Tensor& s) { return rowwise(x, s, true); }

Tensor sum(const Tensor& a) {
    const auto& an = node_of(a);
    double s = 0.0;
    for (double v : an->value) s += v;
    return make_result(Shape{}, {s}, {an}, [](Node& self) {
        Node& p = *self.parents[0];
        p.ensure_grad();
        for (double& g : p.grad) g += self.grad[0];
    });
}

Tensor mean(const Tensor& a) {
    const auto n = a.numel();
    if (n == 0) throw DimensionError("mean of an empty tensor");
    return scale(sum(a), 1.0 / static_cast<double>(n));
}

Tensor concat(const std::vector<Tensor>& parts, std::size_t axis) {
    if (parts.empty()) throw DimensionError("concat of zero tensors");
    std::vector<NodePtr> nodes;
    for (const auto& p : parts) nodes.push_back(node_of(p));
    Shape shape = nodes[0]->shape;
    if (axis >= shape.size()) throw DimensionError("concat axis out of range");
    std::vector<std::size_t> widths;
    std::size_t total = 0;
    for (const auto& n : nodes) {
        if (n->shape.size() != shape.size()) throw DimensionError("concat rank mismatch");
        for (std::size_t d = 0; d < shape.size(); ++d) {
            if (d != axis && n->shape[d] != shape[d]) {
                throw DimensionError("concat of " + shape_str(shape) + " and " +
                                     shape_str(n->shape));
            }
        }
        widths.push_back(n->shape[axis]);
        total += n->shape[axis];
    }
    shape[axis] = total;
    const AxisSplit sp = split_at(shape, axis);
    std::vector<double> out(numel_of(shape));
    std::size_t offset = 0;
    for (std::size_t k = 0; k < nodes.size(); ++k) {
        const std::size_t w = widths[k] * sp.inner;
        for (std::size_t o = 0; o < sp.outer; ++o) {
            std::copy_n(nodes[k]->value.data() + o * w, w,
                        out.data() + o * total * sp.inner + offset * sp.inner);
        }
        offset += widths[k];
    }
    return make_result(std::move(shape), std::move(out), nodes, [sp, widths, total](Node& self) {
        std::size_t offset = 0;
        for (std::size_t k = 0; k < self.parents.size(); ++k) {
            Node& p = *self.parents[k];
            const std::size_t w = widths[k] * sp.inner;
            if (p.requires_grad) {
                p.ensure_grad();
                for (std::size_t o = 0; o < sp.outer; ++o) {
                    const double* g = self.grad.data() + o * total * sp.inner + offset * sp.inner;
                    double* dst = p.grad.data() + o * w;
                    for (std::size_t i = 0; i < w; ++i) dst[i] += g[i];
                }
            }
            offset += widths[k];
        }
    });
}

Tensor slice(const Tensor& a, std::size_t axis, std::size_t begin, std::size_t end) {
    const auto& an = node_of(a);
    const AxisSplit sp = split_at(an->shape, axis);
    if (begin > end || end > sp.dim) {
        throw DimensionError("slice [" + std::to_string(begin) + "," + std::to_string(end) +
                             ") out of range for " + shape_str(an->shape));
    }
    Shape shape = an->shape;
    shape[axis] = end - begin;
    const std::size_t w = (end - begin) * sp.inner;
    std::vector<double> out(sp.outer * w);
    for (std::size_t o = 0; o < sp.outer; ++o) {
        std::copy_n(an->value.data() + (o * sp.dim + begin) * sp.inner, w, out.data() + o * w);
    }
    return make_result(std::move(shape), std::move(out), {an}, [sp, begin, w](Node& self) {
        Node& p = *self.parents[0];
        p.ensure_grad();
        for (std::size_t o = 0; o < sp.outer; ++o) {
            double* dst = p.grad.data() + (o * sp.dim + begin) * sp.inner;
            const double* g = self.grad.data() + o * w;
            for (std::size_t i = 0; i < w; ++i) dst[i] += g[i];
        }
    });
}

Tensor gather(const Tensor& a, std::size_t axis, const std::vector<std::int64_t>& index) {
    const auto& an = node_of(a);
    const AxisSplit sp = split_at(an->shape, axis);
    for (auto i : index) {
        if (i < -1 || i >= static_cast<std::int64_t>(sp.dim)) {
            throw DimensionError("gather index " + std::to_string(i) + " out of range");
        }
    }
    Shape shape = an->shape;
    shape[axis] = index.size();
    const std::size_t m = index.size();
    std::vector<double> out(sp.outer * m * sp.inner, 0.0);
    for (std::size_t o = 0; o < sp.outer; ++o) {
        for (std::size_t j = 0; j < m; ++j) {
            if (index[j] < 0) continue;
            std::copy_n(an->value.data() + (o * sp.dim + index[j]) * sp.inner, sp.inner,
                        out.data() + (o * m + j) * sp.inner);
        }
    }
    return make_result(std::move(shape), std::move(out), {an}, [sp, index, m](Node& self) {
        Node& p = *self.parents[0];
        p.ensure_grad();
        for (std::size_t o = 0; o < sp.outer; ++o) {
            for (std::size_t j = 0; j < m; ++j) {
                if (index[j] < 0) continue;
                double* dst = p.grad.data() + (o * sp.dim + index[j]) * sp.inner;
                const double* g = self.grad.data() + (o * m + j) * sp.inner;
                for (std::size_t i = 0; i < sp.inner; ++i) dst[i] += g[i];
            }
        }
    });
}

// ---------------------------------------------------------------- normalisers

Tensor softmax_lastdim(const Tensor& a) {
    const auto& an = node_of(a);
    if (an->shape.empty()) throw DimensionError("softmax of a scalar");
    const std::size_t n = an->shape.back();
    const std::size_t rows = an->value.size() / n;
    std::vector<double> out(an->value.size());
    for (std::size_t r = 0; r < rows; ++r) {
        const double* x = an->value.data() + r * n;
        double* y = out.data() + r * n;
        const double mx = *std::max_element(x, x + n);
        double z = 0.0;
        for (std::size_t j = 0; j < n; ++j) z += (y[j] = std::exp(x[j] - mx));
        for (std::size_t j = 0; j < n; ++j) y[j] /= z;
    }
    return make_result(an->shape, std::move(out), {an}, [n, rows](Node& self) {
        Node& p = *self.parents[0];
        p.ensure_grad();
        for (std::size_t r = 0; r < rows; ++r) {
            const double* y = self.value.data() + r * n;
            const double* g = self.grad.data() + r * n;
            double dot = 0.0;
            for (std::size_t j = 0; j < n; ++j) dot += g[j] * y[j];
            for (std::size_t j = 0; j < n; ++j) p.grad[r * n + j] += y[j] * (g[j] - dot);
        }
    });
}

Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, double eps) {
    const auto& xn = node_of(x);
    const auto& gn = node_of(gamma);
    const auto& bn = node_of(beta);
    if (xn->shape.empty()) throw DimensionError("layer_norm of a scalar");
    const std::size_t n = xn->shape.back();
    if (gn->value.size() != n || bn->value.size() != n) {
        throw DimensionError("layer_norm affine parameters must have " + std::to_string(n) +
                             " entries");
    }
    const std::size_t rows = xn->value.size() / n;
    auto xhat = std::make_shared<std::vector<double>>(xn->value.size());
    auto inv_std = std::make_shared<std::vector<double>>(rows);
    std::vector<double> out(xn->value.size());
    for (std::size_t r = 0; r < rows; ++r) {
        const double* v = xn->value.data() + r * n;
        double mu = 0.0;
        for (std::size_t j = 0; j < n; ++j) mu += v[j];
        mu /= static_cast<double>(n);
        double var = 0.0;
        for (std::size_t j = 0; j < n; ++j) var += (v[j] - mu) * (v[j] - mu);
        var /= static_cast<double>(n);
        const double is = 1.0 / std::sqrt(var + eps);
        (*inv_std)[r] = is;
        for (std::size_t j = 0; j < n; ++j) {
            const double h = (v[j] - mu) * is;
            (*xhat)[r * n + j] = h;
            out[r * n + j] = h * gn->value[j] + bn->value[j];
        }
    }
    return make_result(xn->shape, std::move(out), {xn, gn, bn}, [n, rows, xhat, inv_std](Node& self) {
        Node& px = *self.parents[0];
        Node& pg = *self.parents[1];
        Node& pb = *self.parents[2];
        if (px.requires_grad) px.ensure_grad();
        if (pg.requires_grad) pg.ensure_grad();
        if (pb.requires_grad) pb.ensure_grad();
        std::vector<double> dh(n);
        for (std::size_t r = 0; r < rows; ++r) {
            const double* g = self.grad.data() + r * n;
            const double* h = xhat->data() + r * n;
            double s1 = 0.0, s2 = 0.0;
            for (std::size_t j = 0; j < n; ++j) {
                if (pg.requires_grad) pg.grad[j] += g[j] * h[j];
                if (pb.requires_grad) pb.grad[j] += g[j];
                dh[j] = g[j] * pg.value[j];
                s1 += dh[j];
                s2 += dh[j] * h[j];
            }
            if (!px.requires_grad) continue;
            const double inv_n = 1.0 / static_cast<double>(n);
            for (std::size_t j = 0; j < n; ++j) {
                px.grad[r * n + j] += (*inv_std)[r] * (dh[j] - inv_n * s1 - h[j] * inv_n * s2);
            }
        }
    });
}

Tensor batch_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, double eps,
                  BatchStats* stats) {
    const auto& xn = node_of(x);
    const auto& gn = node_of(gamma);
    const auto& bn = node_of(beta);
    if (xn->shape.size() != 2) throw DimensionError("batch_norm needs a [rows x features] input");
    const std::size_t m = xn->shape[0], n = xn->shape[1];
    if (m == 0) throw DimensionError("batch_norm of an empty batch");
    if (gn->value.size() != n || bn->value.size() != n) {
        throw DimensionError("batch_norm affine parameters must have " + std::to_string(n) +
                             " entries");
    }
    std::vector<double> mu(n, 0.0), var(n, 0.0);
    for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < n; ++j) mu[j] += xn->value[i * n + j];
    for (auto& v : mu) v /= static_cast<double>(m);
    for (std::size_t i = 0; i < m; ++i) {
        for (std::size_t j = 0; j < n; ++j) {
            const double d = xn->value[i * n + j] - mu[j];
            var[j] += d * d;
        }
    }
    if (stats) {
        stats->mean = mu;
        stats->var_unbiased.resize(n);
        for (std::size_t j = 0; j < n; ++j) {
            stats->var_unbiased[j] = m > 1 ? var[j] / static_cast<double>(m - 1) : 0.0;
        }
    }
    for (auto& v : var) v /= static_cast<double>(m);
    if (stats) stats->var = var;
    auto inv_std = std::make_shared<std::vector<double>>(n);
    for (std::size_t j = 0; j < n; ++j) (*inv_std)[j] = 1.0 / std::sqrt(var[j] + eps);
    auto xhat = std::make_shared<std::vector<double>>(m * n);
    std::vector<double> out(m * n);
    for (std::size_t i = 0; i < m; ++i) {
        for (std::size_t j = 0; j < n; ++j) {
            const double h = (xn->value[i * n + j] - mu[j]) * (*inv_std)[j];
            (*xhat)[i * n + j] = h;
            out[i * n + j] = h * gn->value[j] + bn->value[j];
        }
    }
    return make_result(xn->shape, std::move(out), {xn, gn, bn}, [m, n, xhat, inv_std](Node& self) {
        Node& px = *self.parents[0];
        Node& pg = *self.parents[1];
        Node& pb = *self.parents[2];
        if (px.requires_grad) px.ensure_grad();
        if (pg.requires_grad) pg.ensure_grad();
        if (pb.requires_grad) pb.ensure_grad();
        std::vector<double> s1(n, 0.0), s2(n, 0.0);
        for (std::size_t i = 0; i < m; ++i) {
            for (std::size_t j = 0; j < n; ++j) {
                const double g = self.grad[i * n + j];
                const double h = (*xhat)[i * n + j];
                if (pg.requires_grad) pg.grad[j] += g * h;
                if (pb.requires_grad) pb.grad[j] += g;
                const double dh = g * pg.value[j];
                s1[j] += dh;
                s2[j] += dh * h;
            }
        }
        if (!px.requires_grad) return;
        const double inv_m = 1.0 / static_cast<double>(m);
        for (std::size_t i = 0; i < m; ++i) {
            for (std::size_t j = 0; j < n; ++j) {
                const double dh = self.grad[i * n + j] * pg.value[j];
                const double h = (*xhat)[i * n + j];
                px.grad[i * n + j] += (*inv_std)[j] * (dh - inv_m * s1[j] - h * inv_m * s2[j]);
            }
        }
    });
}

Tensor dropout(const Tensor& x, double p, std::mt19937_64& rng) {
    if (p < 0.0 || p >= 1.0) throw DomainError("dropout probability must lie in [0, 1)");
    if (p == 0.0) return x;
    std::bernoulli_distribution keep(1.0 - p);
    const double s = 1.0 / (1.0 - p);
    std::vector<double> mask(x.numel());
    for (auto& v : mask) v = keep(rng) ? s : 0.0;
    return mul(x, Tensor(x.shape(), std::move(mask)));
}

} // namespace wqt::nd
