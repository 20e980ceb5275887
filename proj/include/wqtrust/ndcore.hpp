#pragma once

// Dense 64-bit tensors with reverse-mode automatic differentiation.
//
// A Tensor is a cheap handle onto a graph node. Operations on tensors that
// require gradients record their inputs and a local-gradient closure; calling
// backward() on a scalar result orders the reachable nodes topologically (a
// Tape) and propagates gradients into every requires_grad leaf.
//
// Broadcasting is deliberately narrow: binary elementwise ops accept equal
// shapes or a single-element operand. Bias-style row broadcasting is exposed as
// the explicit ops add_bias() and mul_cols().

#include <cstddef>
#include <cstdint>
#include <functional>
#include <initializer_list>
#include <memory>
#include <random>
#include <span>
#include <vector>

namespace wqt::nd {

using Shape = std::vector<std::size_t>;

std::size_t numel_of(const Shape& shape);

namespace detail {
struct Node;
}

class Tensor {
public:
    Tensor() = default;
    Tensor(Shape shape, std::vector<double> data, bool requires_grad = false);

    static Tensor zeros(Shape shape, bool requires_grad = false);
    static Tensor full(Shape shape, double value, bool requires_grad = false);
    static Tensor scalar(double value, bool requires_grad = false);
    static Tensor vector(std::vector<double> data, bool requires_grad = false);
    static Tensor matrix(std::size_t rows, std::size_t cols, std::vector<double> data,
                         bool requires_grad = false);
    static Tensor identity(std::size_t n);

    bool defined() const noexcept { return static_cast<bool>(node_); }
    const Shape& shape() const;
    std::size_t rank() const { return shape().size(); }
    std::size_t dim(std::size_t axis) const;
    std::size_t numel() const;

    std::span<const double> data() const;
    double operator[](std::size_t i) const { return data()[i]; }
    /// Value of a single-element tensor.
    double item() const;

    bool requires_grad() const;
    bool is_leaf() const;
    bool has_grad() const;
    /// Gradient accumulator; empty span when no gradient has been accumulated.
    std::span<const double> grad() const;
    void zero_grad();

    /// Writable storage of a leaf tensor (parameter updates). Throws on
    /// non-leaf tensors so recorded graph values stay immutable.
    std::span<double> mutable_data();

    /// Copy of the values with no graph attached.
    Tensor detach(bool requires_grad = false) const;

    const detail::Node* node() const noexcept { return node_.get(); }

private:
    explicit Tensor(std::shared_ptr<detail::Node> node) : node_(std::move(node)) {}
    std::shared_ptr<detail::Node> node_;

    friend struct TensorAccess;
};

/// Topologically ordered view of the graph reachable from a root. Every
/// node's inputs precede it; backward visits each node exactly once.
class Tape {
public:
    static Tape record(const Tensor& root);
    std::size_t size() const noexcept { return order_.size(); }
    /// Propagates d(root)/d(node) for every recorded node; leaf gradients
    /// accumulate across calls, interior gradients are reset per call.
    void backward();

private:
    Tensor root_;
    std::vector<detail::Node*> order_;
};

/// Reverse-mode pass from a scalar loss.
void backward(const Tensor& loss);

/// Disables graph recording on the current thread for its lifetime.
class NoGradGuard {
public:
    NoGradGuard();
    ~NoGradGuard();
    NoGradGuard(const NoGradGuard&) = delete;
    NoGradGuard& operator=(const NoGradGuard&) = delete;

private:
    bool previous_;
};
bool grad_enabled();

enum class Elementwise { Add, Sub, Mul, Div, Exp, Log, Tanh, Sigmoid, Gelu, LeakyRelu };

inline constexpr double kLeakyReluSlope = 0.01;
/// Cubic coefficient of the tanh approximation of GeLU.
inline constexpr double kGeluCubic = 0.044715;

Tensor elementwise(Elementwise op, const Tensor& a);
Tensor elementwise(Elementwise op, const Tensor& a, const Tensor& b);

Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor div(const Tensor& a, const Tensor& b);
Tensor exp(const Tensor& a);
Tensor log(const Tensor& a);
Tensor tanh(const Tensor& a);
Tensor sigmoid(const Tensor& a);
Tensor gelu(const Tensor& a);
Tensor leaky_relu(const Tensor& a, double slope = kLeakyReluSlope);
Tensor scale(const Tensor& a, double factor);
Tensor add_scalar(const Tensor& a, double value);

inline Tensor operator+(const Tensor& a, const Tensor& b) { return add(a, b); }
inline Tensor operator-(const Tensor& a, const Tensor& b) { return sub(a, b); }
inline Tensor operator*(const Tensor& a, const Tensor& b) { return mul(a, b); }
inline Tensor operator/(const Tensor& a, const Tensor& b) { return div(a, b); }

Tensor matmul(const Tensor& a, const Tensor& b);
/// Batched matmul: [B x m x k] * [B x k x n] -> [B x m x n].
Tensor bmm(const Tensor& a, const Tensor& b);
Tensor transpose(const Tensor& a);
Tensor permute(const Tensor& a, const std::vector<std::size_t>& axes);
Tensor reshape(const Tensor& a, Shape shape);

/// x[..., n] + b[n] for every leading index.
Tensor add_bias(const Tensor& x, const Tensor& bias);
/// x[..., n] * s[n] for every leading index.
Tensor mul_cols(const Tensor& x, const Tensor& s);

Tensor sum(const Tensor& a);
Tensor mean(const Tensor& a);

Tensor concat(const std::vector<Tensor>& parts, std::size_t axis);
Tensor slice(const Tensor& a, std::size_t axis, std::size_t begin, std::size_t end);
/// Picks entries along `axis`; an index of -1 yields zeros at that position.
Tensor gather(const Tensor& a, std::size_t axis, const std::vector<std::int64_t>& index);

Tensor softmax_lastdim(const Tensor& a);
Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, double eps = 1e-5);

struct BatchStats {
    std::vector<double> mean;
    std::vector<double> var;          // biased (divides by m)
    std::vector<double> var_unbiased; // divides by m-1; equals var when m == 1
};
/// Training-mode batch normalisation over the rows of x[m x n].
Tensor batch_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, double eps,
                  BatchStats* stats = nullptr);

/// Inverted dropout with keep probability 1-p; identity when p == 0.
Tensor dropout(const Tensor& x, double p, std::mt19937_64& rng);

} // namespace wqt::nd
