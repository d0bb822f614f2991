#pragma once

#include <cstddef>
#include <functional>
#include <memory>
#include <string>
#include <vector>

namespace ovf {

using Shape = std::vector<int>;

size_t numel(const Shape& s);
std::string shape_str(const Shape& s);

namespace detail {

struct Node {
    Shape shape;
    std::vector<double> value;
    bool requires_grad = false;
    std::vector<double> grad;  // sized lazily during backward
    std::string name;

    std::vector<std::shared_ptr<Node>> inputs;
    std::function<void()> backward;  // adds d(out) contributions into inputs' grads

    void ensure_grad();
};

}  // namespace detail

// Dense row-major f64 tensor handle. Values are written once by the op that
// produces them; only leaf data (parameters) and grad buffers mutate after.
class Tensor {
public:
    Tensor() = default;

    static Tensor zeros(Shape shape);
    static Tensor full(Shape shape, double v);
    static Tensor from(Shape shape, std::vector<double> data);
    static Tensor scalar(double v);
    // Leaf with requires_grad set; gradients accumulate here during backward.
    static Tensor param(Shape shape, std::vector<double> data, std::string name = "");

    bool defined() const { return node_ != nullptr; }
    const Shape& shape() const;
    int rows() const;  // rank-2 helpers
    int cols() const;
    size_t size() const;
    bool requires_grad() const;
    const std::string& name() const;

    const std::vector<double>& data() const;
    std::vector<double>& mut_data();  // leaves only (init / optimizer updates)
    double item() const;              // scalar tensors

    const std::vector<double>& grad() const;
    std::vector<double>& mut_grad();
    bool has_grad() const;
    void zero_grad();

    std::shared_ptr<detail::Node> node() const { return node_; }
    static Tensor wrap(std::shared_ptr<detail::Node> n);

private:
    std::shared_ptr<detail::Node> node_;
};

// Records executed ops so backward can replay them in exact reverse order.
class Tape {
public:
    void backward(const Tensor& loss);
    size_t size() const { return order_.size(); }
    void clear() { order_.clear(); }

    void record(std::shared_ptr<detail::Node> n) { order_.push_back(std::move(n)); }

private:
    std::vector<std::shared_ptr<detail::Node>> order_;
};

// RAII: makes a tape the active recorder on this thread. Ops run without an
// active tape compute values only (pure inference).
class TapeScope {
public:
    explicit TapeScope(Tape& tape);
    ~TapeScope();
    TapeScope(const TapeScope&) = delete;
    TapeScope& operator=(const TapeScope&) = delete;

private:
    Tape* prev_;
};

Tape* active_tape();

// ---- elementwise ----
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor div(const Tensor& a, const Tensor& b);
Tensor add_scalar(const Tensor& a, double c);
Tensor mul_scalar(const Tensor& a, double c);
Tensor neg(const Tensor& a);
Tensor relu(const Tensor& a);
Tensor sigmoid(const Tensor& a);
Tensor softplus(const Tensor& a);
Tensor exp_t(const Tensor& a);
Tensor log_t(const Tensor& a);
Tensor sqrt_t(const Tensor& a);
Tensor pow_const(const Tensor& a, double p);
Tensor minimum(const Tensor& a, const Tensor& b);
Tensor maximum(const Tensor& a, const Tensor& b);

// ---- linear algebra / structure ----
Tensor matmul(const Tensor& a, const Tensor& b);
Tensor transpose(const Tensor& a);
Tensor reshape(const Tensor& a, Shape shape);
Tensor concat_cols(const std::vector<Tensor>& parts);
Tensor slice_cols(const Tensor& a, int c0, int width);
Tensor gather_rows(const Tensor& a, const std::vector<int>& idx);
Tensor rows_sum(const Tensor& a);                       // m x n -> m x 1
Tensor add_rowvec(const Tensor& a, const Tensor& b);    // b: n (broadcast over rows)
Tensor mul_bcast_col(const Tensor& a, const Tensor& v); // v: m x 1
Tensor div_bcast_col(const Tensor& a, const Tensor& v);
Tensor mul_scalar_t(const Tensor& a, const Tensor& s);  // s: single element
Tensor add_scalar_t(const Tensor& a, const Tensor& s);
Tensor sum_all(const Tensor& a);

// ---- neural-net primitives ----
Tensor softmax_rows(const Tensor& a);
Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias, double eps);

enum class Padding { Same, Valid };
// x: T x C_in, kernel: k x C_in x C_out. Same padding keeps ceil(T/stride)
// steps and requires odd k; bias is added separately via add_rowvec.
Tensor conv1d(const Tensor& x, const Tensor& kernel, int stride, Padding padding);
// kernel: k x C, one filter per channel (same padding).
Tensor conv1d_depthwise(const Tensor& x, const Tensor& kernel, int stride);

int conv1d_out_len(int t, int k, int stride, Padding padding);

// Max over components of |analytic - central difference| / max(1, |analytic|)
// for a scalar-valued function of x. h must lie in (0, 1e-2].
double grad_check(const std::function<Tensor(const Tensor&)>& f, Tensor x, double h);

}  // namespace ovf
