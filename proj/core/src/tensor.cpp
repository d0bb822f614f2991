#include "ovformer/tensor.hpp"

#include <algorithm>
#include <cassert>
#include <cmath>
#include <sstream>

#include "ovformer/errors.hpp"

namespace ovf {

size_t numel(const Shape& s) {
    size_t n = 1;
    for (int d : s) n *= static_cast<size_t>(d);
    return n;
}

std::string shape_str(const Shape& s) {
    std::ostringstream os;
    os << "[";
    for (size_t i = 0; i < s.size(); ++i) os << (i ? "x" : "") << s[i];
    os << "]";
    return os.str();
}

namespace detail {

void Node::ensure_grad() {
    if (grad.size() != value.size()) grad.assign(value.size(), 0.0);
}

}  // namespace detail

using detail::Node;

namespace {

thread_local Tape* g_active_tape = nullptr;

std::shared_ptr<Node> new_node(Shape shape, std::vector<double> value) {
    auto n = std::make_shared<Node>();
    n->shape = std::move(shape);
    n->value = std::move(value);
    return n;
}

// Links the result into the graph when a tape is active and any input needs
// gradients; otherwise the value is returned unrecorded.
Tensor finish(std::shared_ptr<Node> out, std::vector<Tensor> ins,
              const std::function<std::function<void()>(Node*, std::vector<Node*>)>& make_backward) {
    bool needs_grad = false;
    for (const auto& t : ins) needs_grad = needs_grad || t.requires_grad();
    if (needs_grad && g_active_tape != nullptr) {
        out->requires_grad = true;
        std::vector<Node*> raw;
        raw.reserve(ins.size());
        for (auto& t : ins) {
            out->inputs.push_back(t.node());
            raw.push_back(t.node().get());
        }
        out->backward = make_backward(out.get(), std::move(raw));
        g_active_tape->record(out);
    }
    return Tensor::wrap(std::move(out));
}

void check_same_shape(const Tensor& a, const Tensor& b, const char* op) {
    if (a.shape() != b.shape())
        throw DataError(std::string(op) + ": shape mismatch " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
}

void check_rank2(const Tensor& a, const char* op) {
    if (a.shape().size() != 2) throw DataError(std::string(op) + ": expected rank-2, got " + shape_str(a.shape()));
}

// Elementwise with custom value/partial functions.
template <typename FwdFn, typename GradFn>
Tensor unary_op(const Tensor& a, FwdFn fwd, GradFn dfdx) {
    const auto& av = a.data();
    std::vector<double> out(av.size());
    for (size_t i = 0; i < av.size(); ++i) out[i] = fwd(av[i]);
    auto node = new_node(a.shape(), std::move(out));
    return finish(node, {a}, [dfdx](Node* o, std::vector<Node*> in) {
        return [o, in, dfdx]() {
            Node* x = in[0];
            if (!x->requires_grad) return;
            x->ensure_grad();
            for (size_t i = 0; i < o->value.size(); ++i)
                x->grad[i] += o->grad[i] * dfdx(x->value[i], o->value[i]);
        };
    });
}

}  // namespace

// ---- Tensor -------------------------------------------------------------

Tensor Tensor::wrap(std::shared_ptr<Node> n) {
    Tensor t;
    t.node_ = std::move(n);
    return t;
}

Tensor Tensor::zeros(Shape shape) {
    size_t n = numel(shape);
    return wrap(new_node(std::move(shape), std::vector<double>(n, 0.0)));
}

Tensor Tensor::full(Shape shape, double v) {
    size_t n = numel(shape);
    return wrap(new_node(std::move(shape), std::vector<double>(n, v)));
}

Tensor Tensor::from(Shape shape, std::vector<double> data) {
    if (numel(shape) != data.size())
        throw DataError("tensor data length " + std::to_string(data.size()) + " does not match shape " + shape_str(shape));
    return wrap(new_node(std::move(shape), std::move(data)));
}

Tensor Tensor::scalar(double v) { return from({1}, {v}); }

Tensor Tensor::param(Shape shape, std::vector<double> data, std::string name) {
    Tensor t = from(std::move(shape), std::move(data));
    t.node_->requires_grad = true;
    t.node_->name = std::move(name);
    return t;
}

const Shape& Tensor::shape() const { return node_->shape; }
int Tensor::rows() const { return node_->shape.at(0); }
int Tensor::cols() const { return node_->shape.at(1); }
size_t Tensor::size() const { return node_->value.size(); }
bool Tensor::requires_grad() const { return node_->requires_grad; }
const std::string& Tensor::name() const { return node_->name; }
const std::vector<double>& Tensor::data() const { return node_->value; }
std::vector<double>& Tensor::mut_data() { return node_->value; }

double Tensor::item() const {
    if (size() != 1) throw UsageError("item() on non-scalar tensor " + shape_str(shape()));
    return node_->value[0];
}

const std::vector<double>& Tensor::grad() const {
    node_->ensure_grad();
    return node_->grad;
}

std::vector<double>& Tensor::mut_grad() {
    node_->ensure_grad();
    return node_->grad;
}

bool Tensor::has_grad() const { return !node_->grad.empty(); }

void Tensor::zero_grad() { node_->grad.assign(node_->value.size(), 0.0); }

// ---- Tape ---------------------------------------------------------------

void Tape::backward(const Tensor& loss) {
    if (loss.size() != 1) throw UsageError("backward requires a scalar loss, got " + shape_str(loss.shape()));
    loss.node()->ensure_grad();
    loss.node()->grad[0] += 1.0;
    for (auto it = order_.rbegin(); it != order_.rend(); ++it) {
        Node* n = it->get();
        if (n->backward && !n->grad.empty()) n->backward();
    }
}

TapeScope::TapeScope(Tape& tape) : prev_(g_active_tape) { g_active_tape = &tape; }
TapeScope::~TapeScope() { g_active_tape = prev_; }

Tape* active_tape() { return g_active_tape; }

// ---- elementwise ----------------------------------------------------------

Tensor add(const Tensor& a, const Tensor& b) {
    check_same_shape(a, b, "add");
    const auto &av = a.data(), &bv = b.data();
    std::vector<double> out(av.size());
    for (size_t i = 0; i < av.size(); ++i) out[i] = av[i] + bv[i];
    return finish(new_node(a.shape(), std::move(out)), {a, b}, [](Node* o, std::vector<Node*> in) {
        return [o, in]() {
            for (Node* x : in) {
                if (!x->requires_grad) continue;
                x->ensure_grad();
                for (size_t i = 0; i < o->grad.size(); ++i) x->grad[i] += o->grad[i];
            }
        };
    });
}

Tensor sub(const Tensor& a, const Tensor& b) {
    check_same_shape(a, b, "sub");
    const auto &av = a.data(), &bv = b.data();
    std::vector<double> out(av.size());
    for (size_t i = 0; i < av.size(); ++i) out[i] = av[i] - bv[i];
    return finish(new_node(a.shape(), std::move(out)), {a, b}, [](Node* o, std::vector<Node*> in) {
        return [o, in]() {
            if (in[0]->requires_grad) {
                in[0]->ensure_grad();
                for (size_t i = 0; i < o->grad.size(); ++i) in[0]->grad[i] += o->grad[i];
            }
            if (in[1]->requires_grad) {
                in[1]->ensure_grad();
                for (size_t i = 0; i < o->grad.size(); ++i) in[1]->grad[i] -= o->grad[i];
            }
        };
    });
}

Tensor mul(const Tensor& a, const Tensor& b) {
    check_same_shape(a, b, "mul");
    const auto &av = a.data(), &bv = b.data();
    std::vector<double> out(av.size());
    for (size_t i = 0; i < av.size(); ++i) out[i] = av[i] * bv[i];
    return finish(new_node(a.shape(), std::move(out)), {a, b}, [](Node* o, std::vector<Node*> in) {
        return [o, in]() {
            Node *a = in[0], *b = in[1];
            if (a->requires_grad) {
                a->ensure_grad();
                for (size_t i = 0; i < o->grad.size(); ++i) a->grad[i] += o->grad[i] * b->value[i];
            }
            if (b->requires_grad) {
                b->ensure_grad();
                for (size_t i = 0; i < o->grad.size(); ++i) b->grad[i] += o->grad[i] * a->value[i];
            }
        };
    });
}

Tensor div(const Tensor& a, const Tensor& b) {
    check_same_shape(a, b, "div");
    const auto &av = a.data(), &bv = b.data();
    std::vector<double> out(av.size());
    for (size_t i = 0; i < av.size(); ++i) out[i] = av[i] / bv[i];
    return finish(new_node(a.shape(), std::move(out)), {a, b}, [](Node* o, std::vector<Node*> in) {
        return [o, in]() {
            Node *a = in[0], *b = in[1];
            if (a->requires_grad) {
                a->ensure_grad();
                for (size_t i = 0; i < o->grad.size(); ++i) a->grad[i] += o->grad[i] / b->value[i];
            }
            if (b->requires_grad) {
                b->ensure_grad();
                for (size_t i = 0; i < o->grad.size(); ++i)
                    b->grad[i] -= o->grad[i] * a->value[i] / (b->value[i] * b->value[i]);
            }
        };
    });
}

Tensor add_scalar(const Tensor& a, double c) {
    return unary_op(a, [c](double x) { return x + c; }, [](double, double) { return 1.0; });
}

Tensor mul_scalar(const Tensor& a, double c) {
    return unary_op(a, [c](double x) { return x * c; }, [c](double, double) { return c; });
}

Tensor neg(const Tensor& a) { return mul_scalar(a, -1.0); }

Tensor relu(const Tensor& a) {
    return unary_op(a, [](double x) { return x > 0.0 ? x : 0.0; },
                    [](double x, double) { return x > 0.0 ? 1.0 : 0.0; });
}

Tensor sigmoid(const Tensor& a) {
    return unary_op(a,
                    [](double x) {
                        if (x >= 0.0) return 1.0 / (1.0 + std::exp(-x));
                        double e = std::exp(x);
                        return e / (1.0 + e);
                    },
                    [](double, double y) { return y * (1.0 - y); });
}

Tensor softplus(const Tensor& a) {
    return unary_op(a, [](double x) { return std::max(x, 0.0) + std::log1p(std::exp(-std::fabs(x))); },
                    [](double x, double) {
                        if (x >= 0.0) return 1.0 / (1.0 + std::exp(-x));
                        double e = std::exp(x);
                        return e / (1.0 + e);
                    });
}

Tensor exp_t(const Tensor& a) {
    return unary_op(a, [](double x) { return std::exp(x); }, [](double, double y) { return y; });
}

Tensor log_t(const Tensor& a) {
    return unary_op(a, [](double x) { return std::log(x); }, [](double x, double) { return 1.0 / x; });
}

Tensor sqrt_t(const Tensor& a) {
    return unary_op(a, [](double x) { return std::sqrt(x); },
                    [](double, double y) { return y > 0.0 ? 0.5 / y : 0.0; });
}

Tensor pow_const(const Tensor& a, double p) {
    return unary_op(a, [p](double x) { return std::pow(x, p); },
                    [p](double x, double) {
                        if (x == 0.0) return p == 1.0 ? 1.0 : 0.0;
                        return p * std::pow(x, p - 1.0);
                    });
}

Tensor minimum(const Tensor& a, const Tensor& b) {
    check_same_shape(a, b, "minimum");
    const auto &av = a.data(), &bv = b.data();
    std::vector<double> out(av.size());
    for (size_t i = 0; i < av.size(); ++i) out[i] = std::min(av[i], bv[i]);
    return finish(new_node(a.shape(), std::move(out)), {a, b}, [](Node* o, std::vector<Node*> in) {
        return [o, in]() {
            Node *a = in[0], *b = in[1];
            if (a->requires_grad) a->ensure_grad();
            if (b->requires_grad) b->ensure_grad();
            for (size_t i = 0; i < o->grad.size(); ++i) {
                if (a->value[i] <= b->value[i]) {  // ties go to the first operand
                    if (a->requires_grad) a->grad[i] += o->grad[i];
                } else if (b->requires_grad) {
                    b->grad[i] += o->grad[i];
                }
            }
        };
    });
}

Tensor maximum(const Tensor& a, const Tensor& b) {
    check_same_shape(a, b, "maximum");
    const auto &av = a.data(), &bv = b.data();
    std::vector<double> out(av.size());
    for (size_t i = 0; i < av.size(); ++i) out[i] = std::max(av[i], bv[i]);
    return finish(new_node(a.shape(), std::move(out)), {a, b}, [](Node* o, std::vector<Node*> in) {
        return [o, in]() {
            Node *a = in[0], *b = in[1];
            if (a->requires_grad) a->ensure_grad();
            if (b->requires_grad) b->ensure_grad();
            for (size_t i = 0; i < o->grad.size(); ++i) {
                if (a->value[i] >= b->value[i]) {
                    if (a->requires_grad) a->grad[i] += o->grad[i];
                } else if (b->requires_grad) {
                    b->grad[i] += o->grad[i];
                }
            }
        };
    });
}

// ---- linear algebra -------------------------------------------------------

Tensor matmul(const Tensor& a, const Tensor& b) {
    check_rank2(a, "matmul");
    check_rank2(b, "matmul");
    const int m = a.rows(), k = a.cols(), k2 = b.rows(), n = b.cols();
    if (k != k2)
        throw DataError("matmul: inner extents differ, " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
    const double* av = a.data().data();
    const double* bv = b.data().data();
    std::vector<double> out(static_cast<size_t>(m) * n, 0.0);
    for (int i = 0; i < m; ++i) {
        double* orow = out.data() + static_cast<size_t>(i) * n;
        const double* arow = av + static_cast<size_t>(i) * k;
        for (int kk = 0; kk < k; ++kk) {
            const double aik = arow[kk];
            if (aik == 0.0) continue;
            const double* brow = bv + static_cast<size_t>(kk) * n;
            for (int j = 0; j < n; ++j) orow[j] += aik * brow[j];
        }
    }
    return finish(new_node({m, n}, std::move(out)), {a, b}, [m, k, n](Node* o, std::vector<Node*> in) {
        return [o, in, m, k, n]() {
            Node *a = in[0], *b = in[1];
            const double* g = o->grad.data();
            if (a->requires_grad) {  // dA = G * B^T
                a->ensure_grad();
                const double* bv = b->value.data();
                for (int i = 0; i < m; ++i) {
                    const double* grow = g + static_cast<size_t>(i) * n;
                    double* da = a->grad.data() + static_cast<size_t>(i) * k;
                    for (int kk = 0; kk < k; ++kk) {
                        const double* brow = bv + static_cast<size_t>(kk) * n;
                        double acc = 0.0;
                        for (int j = 0; j < n; ++j) acc += grow[j] * brow[j];
                        da[kk] += acc;
                    }
                }
            }
            if (b->requires_grad) {  // dB = A^T * G
                b->ensure_grad();
                const double* av = a->value.data();
                for (int i = 0; i < m; ++i) {
                    const double* grow = g + static_cast<size_t>(i) * n;
                    const double* arow = av + static_cast<size_t>(i) * k;
                    for (int kk = 0; kk < k; ++kk) {
                        const double aik = arow[kk];
                        if (aik == 0.0) continue;
                        double* db = b->grad.data() + static_cast<size_t>(kk) * n;
                        for (int j = 0; j < n; ++j) db[j] += aik * grow[j];
                    }
                }
            }
        };
    });
}

Tensor transpose(const Tensor& a) {
    check_rank2(a, "transpose");
    const int m = a.rows(), n = a.cols();
    const auto& av = a.data();
    std::vector<double> out(av.size());
    for (int i = 0; i < m; ++i)
        for (int j = 0; j < n; ++j) out[static_cast<size_t>(j) * m + i] = av[static_cast<size_t>(i) * n + j];
    return finish(new_node({n, m}, std::move(out)), {a}, [m, n](Node* o, std::vector<Node*> in) {
        return [o, in, m, n]() {
            Node* a = in[0];
            if (!a->requires_grad) return;
            a->ensure_grad();
            for (int j = 0; j < n; ++j)
                for (int i = 0; i < m; ++i)
                    a->grad[static_cast<size_t>(i) * n + j] += o->grad[static_cast<size_t>(j) * m + i];
        };
    });
}

Tensor reshape(const Tensor& a, Shape shape) {
    if (numel(shape) != a.size())
        throw DataError("reshape: cannot view " + shape_str(a.shape()) + " as " + shape_str(shape));
    return finish(new_node(std::move(shape), a.data()), {a}, [](Node* o, std::vector<Node*> in) {
        return [o, in]() {
            Node* a = in[0];
            if (!a->requires_grad) return;
            a->ensure_grad();
            for (size_t i = 0; i < o->grad.size(); ++i) a->grad[i] += o->grad[i];
        };
    });
}

Tensor concat_cols(const std::vector<Tensor>& parts) {
    if (parts.empty()) throw UsageError("concat_cols: no inputs");
    const int m = parts[0].rows();
    int n = 0;
    for (const auto& p : parts) {
        check_rank2(p, "concat_cols");
        if (p.rows() != m) throw DataError("concat_cols: row mismatch");
        n += p.cols();
    }
    std::vector<double> out(static_cast<size_t>(m) * n);
    int c0 = 0;
    for (const auto& p : parts) {
        const int pc = p.cols();
        for (int i = 0; i < m; ++i)
            for (int j = 0; j < pc; ++j)
                out[static_cast<size_t>(i) * n + c0 + j] = p.data()[static_cast<size_t>(i) * pc + j];
        c0 += pc;
    }
    return finish(new_node({m, n}, std::move(out)), parts, [m, n](Node* o, std::vector<Node*> in) {
        return [o, in, m, n]() {
            int c0 = 0;
            for (Node* p : in) {
                const int pc = p->shape[1];
                if (p->requires_grad) {
                    p->ensure_grad();
                    for (int i = 0; i < m; ++i)
                        for (int j = 0; j < pc; ++j)
                            p->grad[static_cast<size_t>(i) * pc + j] += o->grad[static_cast<size_t>(i) * n + c0 + j];
                }
                c0 += pc;
            }
        };
    });
}

Tensor slice_cols(const Tensor& a, int c0, int width) {
    check_rank2(a, "slice_cols");
    const int m = a.rows(), n = a.cols();
    if (c0 < 0 || width < 1 || c0 + width > n) throw UsageError("slice_cols: window out of range");
    std::vector<double> out(static_cast<size_t>(m) * width);
    for (int i = 0; i < m; ++i)
        for (int j = 0; j < width; ++j)
            out[static_cast<size_t>(i) * width + j] = a.data()[static_cast<size_t>(i) * n + c0 + j];
    return finish(new_node({m, width}, std::move(out)), {a}, [m, n, c0, width](Node* o, std::vector<Node*> in) {
        return [o, in, m, n, c0, width]() {
            Node* a = in[0];
            if (!a->requires_grad) return;
            a->ensure_grad();
            for (int i = 0; i < m; ++i)
                for (int j = 0; j < width; ++j)
                    a->grad[static_cast<size_t>(i) * n + c0 + j] += o->grad[static_cast<size_t>(i) * width + j];
        };
    });
}

Tensor gather_rows(const Tensor& a, const std::vector<int>& idx) {
    check_rank2(a, "gather_rows");
    const int m = a.rows(), n = a.cols();
    for (int r : idx)
        if (r < 0 || r >= m) throw UsageError("gather_rows: index out of range");
    std::vector<double> out(idx.size() * static_cast<size_t>(n));
    for (size_t i = 0; i < idx.size(); ++i)
        std::copy_n(a.data().data() + static_cast<size_t>(idx[i]) * n, n, out.data() + i * n);
    const int om = static_cast<int>(idx.size());
    return finish(new_node({om, n}, std::move(out)), {a}, [idx, n](Node* o, std::vector<Node*> in) {
        return [o, in, idx, n]() {
            Node* a = in[0];
            if (!a->requires_grad) return;
            a->ensure_grad();
            for (size_t i = 0; i < idx.size(); ++i)
                for (int j = 0; j < n; ++j)
                    a->grad[static_cast<size_t>(idx[i]) * n + j] += o->grad[i * static_cast<size_t>(n) + j];
        };
    });
}

Tensor rows_sum(const Tensor& a) {
    check_rank2(a, "rows_sum");
    const int m = a.rows(), n = a.cols();
    std::vector<double> out(m, 0.0);
    for (int i = 0; i < m; ++i) {
        double acc = 0.0;
        for (int j = 0; j < n; ++j) acc += a.data()[static_cast<size_t>(i) * n + j];
        out[i] = acc;
    }
    return finish(new_node({m, 1}, std::move(out)), {a}, [m, n](Node* o, std::vector<Node*> in) {
        return [o, in, m, n]() {
            Node* a = in[0];
            if (!a->requires_grad) return;
            a->ensure_grad();
            for (int i = 0; i < m; ++i)
                for (int j = 0; j < n; ++j) a->grad[static_cast<size_t>(i) * n + j] += o->grad[i];
        };
    });
}

Tensor add_rowvec(const Tensor& a, const Tensor& b) {
    check_rank2(a, "add_rowvec");
    if (b.shape().size() != 1 || b.shape()[0] != a.cols())
        throw DataError("add_rowvec: bias shape " + shape_str(b.shape()) + " does not match " + shape_str(a.shape()));
    const int m = a.rows(), n = a.cols();
    std::vector<double> out(a.data());
    for (int i = 0; i < m; ++i)
        for (int j = 0; j < n; ++j) out[static_cast<size_t>(i) * n + j] += b.data()[j];
    return finish(new_node(a.shape(), std::move(out)), {a, b}, [m, n](Node* o, std::vector<Node*> in) {
        return [o, in, m, n]() {
            Node *a = in[0], *b = in[1];
            if (a->requires_grad) {
                a->ensure_grad();
                for (size_t i = 0; i < o->grad.size(); ++i) a->grad[i] += o->grad[i];
            }
            if (b->requires_grad) {
                b->ensure_grad();
                for (int i = 0; i < m; ++i)
                    for (int j = 0; j < n; ++j) b->grad[j] += o->grad[static_cast<size_t>(i) * n + j];
            }
        };
    });
}

Tensor mul_bcast_col(const Tensor& a, const Tensor& v) {
    check_rank2(a, "mul_bcast_col");
    if (v.shape() != Shape{a.rows(), 1}) throw DataError("mul_bcast_col: expected column vector of matching rows");
    const int m = a.rows(), n = a.cols();
    std::vector<double> out(a.data());
    for (int i = 0; i < m; ++i)
        for (int j = 0; j < n; ++j) out[static_cast<size_t>(i) * n + j] *= v.data()[i];
    return finish(new_node(a.shape(), std::move(out)), {a, v}, [m, n](Node* o, std::vector<Node*> in) {
        return [o, in, m, n]() {
            Node *a = in[0], *v = in[1];
            if (a->requires_grad) {
                a->ensure_grad();
                for (int i = 0; i < m; ++i)
                    for (int j = 0; j < n; ++j)
                        a->grad[static_cast<size_t>(i) * n + j] += o->grad[static_cast<size_t>(i) * n + j] * v->value[i];
            }
            if (v->requires_grad) {
                v->ensure_grad();
                for (int i = 0; i < m; ++i) {
                    double acc = 0.0;
                    for (int j = 0; j < n; ++j)
                        acc += o->grad[static_cast<size_t>(i) * n + j] * a->value[static_cast<size_t>(i) * n + j];
                    v->grad[i] += acc;
                }
            }
        };
    });
}

Tensor div_bcast_col(const Tensor& a, const Tensor& v) {
    check_rank2(a, "div_bcast_col");
    if (v.shape() != Shape{a.rows(), 1}) throw DataError("div_bcast_col: expected column vector of matching rows");
    const int m = a.rows(), n = a.cols();
    std::vector<double> out(a.data());
    for (int i = 0; i < m; ++i)
        for (int j = 0; j < n; ++j) out[static_cast<size_t>(i) * n + j] /= v.data()[i];
    return finish(new_node(a.shape(), std::move(out)), {a, v}, [m, n](Node* o, std::vector<Node*> in) {
        return [o, in, m, n]() {
            Node *a = in[0], *v = in[1];
            if (a->requires_grad) {
                a->ensure_grad();
                for (int i = 0; i < m; ++i)
                    for (int j = 0; j < n; ++j)
                        a->grad[static_cast<size_t>(i) * n + j] += o->grad[static_cast<size_t>(i) * n + j] / v->value[i];
            }
            if (v->requires_grad) {
                v->ensure_grad();
                for (int i = 0; i < m; ++i) {
                    double acc = 0.0;
                    for (int j = 0; j < n; ++j)
                        acc += o->grad[static_cast<size_t>(i) * n + j] * a->value[static_cast<size_t>(i) * n + j];
                    v->grad[i] -= acc / (v->value[i] * v->value[i]);
                }
            }
        };
    });
}

Tensor mul_scalar_t(const Tensor& a, const Tensor& s) {
    if (s.size() != 1) throw DataError("mul_scalar_t: scale must be a single element");
    const double c = s.data()[0];
    std::vector<double> out(a.data());
    for (double& x : out) x *= c;
    return finish(new_node(a.shape(), std::move(out)), {a, s}, [](Node* o, std::vector<Node*> in) {
        return [o, in]() {
            Node *a = in[0], *s = in[1];
            if (a->requires_grad) {
                a->ensure_grad();
                for (size_t i = 0; i < o->grad.size(); ++i) a->grad[i] += o->grad[i] * s->value[0];
            }
            if (s->requires_grad) {
                s->ensure_grad();
                double acc = 0.0;
                for (size_t i = 0; i < o->grad.size(); ++i) acc += o->grad[i] * a->value[i];
                s->grad[0] += acc;
            }
        };
    });
}

Tensor add_scalar_t(const Tensor& a, const Tensor& s) {
    if (s.size() != 1) throw DataError("add_scalar_t: addend must be a single element");
    const double c = s.data()[0];
    std::vector<double> out(a.data());
    for (double& x : out) x += c;
    return finish(new_node(a.shape(), std::move(out)), {a, s}, [](Node* o, std::vector<Node*> in) {
        return [o, in]() {
            Node *a = in[0], *s = in[1];
            if (a->requires_grad) {
                a->ensure_grad();
                for (size_t i = 0; i < o->grad.size(); ++i) a->grad[i] += o->grad[i];
            }
            if (s->requires_grad) {
                s->ensure_grad();
                double acc = 0.0;
                for (size_t i = 0; i < o->grad.size(); ++i) acc += o->grad[i];
                s->grad[0] += acc;
            }
        };
    });
}

Tensor sum_all(const Tensor& a) {
    double acc = 0.0;
    for (double x : a.data()) acc += x;
    return finish(new_node({1}, {acc}), {a}, [](Node* o, std::vector<Node*> in) {
        return [o, in]() {
            Node* a = in[0];
            if (!a->requires_grad) return;
            a->ensure_grad();
            for (size_t i = 0; i < a->grad.size(); ++i) a->grad[i] += o->grad[0];
        };
    });
}

// ---- neural-net primitives -------------------------------------------------

Tensor softmax_rows(const Tensor& a) {
    check_rank2(a, "softmax_rows");
    const int m = a.rows(), n = a.cols();
    if (n < 1) throw DataError("softmax_rows: empty rows");
    std::vector<double> out(a.data());
    for (int i = 0; i < m; ++i) {
        double* row = out.data() + static_cast<size_t>(i) * n;
        double mx = row[0];
        for (int j = 1; j < n; ++j) mx = std::max(mx, row[j]);
        double sum = 0.0;
        for (int j = 0; j < n; ++j) {
            row[j] = std::exp(row[j] - mx);
            sum += row[j];
        }
        for (int j = 0; j < n; ++j) row[j] /= sum;
    }
    return finish(new_node(a.shape(), std::move(out)), {a}, [m, n](Node* o, std::vector<Node*> in) {
        return [o, in, m, n]() {
            Node* a = in[0];
            if (!a->requires_grad) return;
            a->ensure_grad();
            for (int i = 0; i < m; ++i) {
                const double* y = o->value.data() + static_cast<size_t>(i) * n;
                const double* g = o->grad.data() + static_cast<size_t>(i) * n;
                double dot = 0.0;
                for (int j = 0; j < n; ++j) dot += g[j] * y[j];
                double* da = a->grad.data() + static_cast<size_t>(i) * n;
                for (int j = 0; j < n; ++j) da[j] += y[j] * (g[j] - dot);
            }
        };
    });
}

Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias, double eps) {
    check_rank2(x, "layer_norm");
    if (eps <= 0.0) throw UsageError("layer_norm: eps must be positive");
    const int m = x.rows(), n = x.cols();
    if (gain.shape() != Shape{n} || bias.shape() != Shape{n})
        throw DataError("layer_norm: gain/bias must have length " + std::to_string(n));
    std::vector<double> out(static_cast<size_t>(m) * n);
    auto xhat = std::make_shared<std::vector<double>>(static_cast<size_t>(m) * n);
    auto inv_std = std::make_shared<std::vector<double>>(m);
    for (int i = 0; i < m; ++i) {
        const double* row = x.data().data() + static_cast<size_t>(i) * n;
        double mean = 0.0;
        for (int j = 0; j < n; ++j) mean += row[j];
        mean /= n;
        double var = 0.0;
        for (int j = 0; j < n; ++j) var += (row[j] - mean) * (row[j] - mean);
        var /= n;
        const double is = 1.0 / std::sqrt(var + eps);
        (*inv_std)[i] = is;
        for (int j = 0; j < n; ++j) {
            const double xh = (row[j] - mean) * is;
            (*xhat)[static_cast<size_t>(i) * n + j] = xh;
            out[static_cast<size_t>(i) * n + j] = xh * gain.data()[j] + bias.data()[j];
        }
    }
    return finish(new_node(x.shape(), std::move(out)), {x, gain, bias},
                  [m, n, xhat, inv_std](Node* o, std::vector<Node*> in) {
                      return [o, in, m, n, xhat, inv_std]() {
                          Node *x = in[0], *gain = in[1], *bias = in[2];
                          if (gain->requires_grad) {
                              gain->ensure_grad();
                              for (int i = 0; i < m; ++i)
                                  for (int j = 0; j < n; ++j)
                                      gain->grad[j] += o->grad[static_cast<size_t>(i) * n + j] *
                                                       (*xhat)[static_cast<size_t>(i) * n + j];
                          }
                          if (bias->requires_grad) {
                              bias->ensure_grad();
                              for (int i = 0; i < m; ++i)
                                  for (int j = 0; j < n; ++j) bias->grad[j] += o->grad[static_cast<size_t>(i) * n + j];
                          }
                          if (x->requires_grad) {
                              x->ensure_grad();
                              for (int i = 0; i < m; ++i) {
                                  const double* g = o->grad.data() + static_cast<size_t>(i) * n;
                                  const double* xh = xhat->data() + static_cast<size_t>(i) * n;
                                  double mean_dxh = 0.0, mean_dxh_xh = 0.0;
                                  for (int j = 0; j < n; ++j) {
                                      const double dxh = g[j] * gain->value[j];
                                      mean_dxh += dxh;
                                      mean_dxh_xh += dxh * xh[j];
                                  }
                                  mean_dxh /= n;
                                  mean_dxh_xh /= n;
                                  double* dx = x->grad.data() + static_cast<size_t>(i) * n;
                                  for (int j = 0; j < n; ++j) {
                                      const double dxh = g[j] * gain->value[j];
                                      dx[j] += (dxh - mean_dxh - xh[j] * mean_dxh_xh) * (*inv_std)[i];
                                  }
                              }
                          }
                      };
                  });
}

int conv1d_out_len(int t, int k, int stride, Padding padding) {
    if (padding == Padding::Same) return (t + stride - 1) / stride;
    return (t - k) / stride + 1;
}

Tensor conv1d(const Tensor& x, const Tensor& kernel, int stride, Padding padding) {
    check_rank2(x, "conv1d");
    if (kernel.shape().size() != 3) throw DataError("conv1d: kernel must be rank-3 (k x C_in x C_out)");
    const int t = x.rows(), cin = x.cols();
    const int k = kernel.shape()[0], kcin = kernel.shape()[1], cout = kernel.shape()[2];
    if (cin != kcin)
        throw DataError("conv1d: input channels " + std::to_string(cin) + " vs kernel " + std::to_string(kcin));
    if (stride < 1) throw UsageError("conv1d: stride must be positive");
    if (padding == Padding::Same && k % 2 == 0)
        throw ConfigError("conv1d: same padding requires odd kernel width, got " + std::to_string(k));
    if (padding == Padding::Valid && t < k) throw DataError("conv1d: input shorter than kernel for valid padding");
    const int pad = padding == Padding::Same ? (k - 1) / 2 : 0;
    const int to = conv1d_out_len(t, k, stride, padding);
    std::vector<double> out(static_cast<size_t>(to) * cout, 0.0);
    const double* xv = x.data().data();
    const double* kv = kernel.data().data();
    for (int ti = 0; ti < to; ++ti) {
        double* orow = out.data() + static_cast<size_t>(ti) * cout;
        const int start = ti * stride - pad;
        for (int j = 0; j < k; ++j) {
            const int src = start + j;
            if (src < 0 || src >= t) continue;
            const double* xrow = xv + static_cast<size_t>(src) * cin;
            const double* kslab = kv + static_cast<size_t>(j) * cin * cout;
            for (int ci = 0; ci < cin; ++ci) {
                const double xi = xrow[ci];
                if (xi == 0.0) continue;
                const double* krow = kslab + static_cast<size_t>(ci) * cout;
                for (int co = 0; co < cout; ++co) orow[co] += xi * krow[co];
            }
        }
    }
    return finish(new_node({to, cout}, std::move(out)), {x, kernel},
                  [t, cin, k, cout, stride, pad, to](Node* o, std::vector<Node*> in) {
                      return [o, in, t, cin, k, cout, stride, pad, to]() {
                          Node *x = in[0], *kernel = in[1];
                          if (x->requires_grad) x->ensure_grad();
                          if (kernel->requires_grad) kernel->ensure_grad();
                          for (int ti = 0; ti < to; ++ti) {
                              const double* g = o->grad.data() + static_cast<size_t>(ti) * cout;
                              const int start = ti * stride - pad;
                              for (int j = 0; j < k; ++j) {
                                  const int src = start + j;
                                  if (src < 0 || src >= t) continue;
                                  for (int ci = 0; ci < cin; ++ci) {
                                      const double* krow =
                                          kernel->value.data() + (static_cast<size_t>(j) * cin + ci) * cout;
                                      if (x->requires_grad) {
                                          double acc = 0.0;
                                          for (int co = 0; co < cout; ++co) acc += g[co] * krow[co];
                                          x->grad[static_cast<size_t>(src) * cin + ci] += acc;
                                      }
                                      if (kernel->requires_grad) {
                                          const double xi = x->value[static_cast<size_t>(src) * cin + ci];
                                          if (xi == 0.0) continue;
                                          double* dk =
                                              kernel->grad.data() + (static_cast<size_t>(j) * cin + ci) * cout;
                                          for (int co = 0; co < cout; ++co) dk[co] += xi * g[co];
                                      }
                                  }
                              }
                          }
                      };
                  });
}

Tensor conv1d_depthwise(const Tensor& x, const Tensor& kernel, int stride) {
    check_rank2(x, "conv1d_depthwise");
    if (kernel.shape().size() != 2) throw DataError("conv1d_depthwise: kernel must be rank-2 (k x C)");
    const int t = x.rows(), c = x.cols();
    const int k = kernel.shape()[0];
    if (kernel.shape()[1] != c) throw DataError("conv1d_depthwise: channel mismatch");
    if (k % 2 == 0) throw ConfigError("conv1d_depthwise: kernel width must be odd");
    if (stride < 1) throw UsageError("conv1d_depthwise: stride must be positive");
    const int pad = (k - 1) / 2;
    const int to = (t + stride - 1) / stride;
    std::vector<double> out(static_cast<size_t>(to) * c, 0.0);
    for (int ti = 0; ti < to; ++ti) {
        const int start = ti * stride - pad;
        double* orow = out.data() + static_cast<size_t>(ti) * c;
        for (int j = 0; j < k; ++j) {
            const int src = start + j;
            if (src < 0 || src >= t) continue;
            const double* xrow = x.data().data() + static_cast<size_t>(src) * c;
            const double* krow = kernel.data().data() + static_cast<size_t>(j) * c;
            for (int ci = 0; ci < c; ++ci) orow[ci] += xrow[ci] * krow[ci];
        }
    }
    return finish(new_node({to, c}, std::move(out)), {x, kernel},
                  [t, c, k, stride, pad, to](Node* o, std::vector<Node*> in) {
                      return [o, in, t, c, k, stride, pad, to]() {
                          Node *x = in[0], *kernel = in[1];
                          if (x->requires_grad) x->ensure_grad();
                          if (kernel->requires_grad) kernel->ensure_grad();
                          for (int ti = 0; ti < to; ++ti) {
                              const double* g = o->grad.data() + static_cast<size_t>(ti) * c;
                              const int start = ti * stride - pad;
                              for (int j = 0; j < k; ++j) {
                                  const int src = start + j;
                                  if (src < 0 || src >= t) continue;
                                  for (int ci = 0; ci < c; ++ci) {
                                      if (x->requires_grad)
                                          x->grad[static_cast<size_t>(src) * c + ci] +=
                                              g[ci] * kernel->value[static_cast<size_t>(j) * c + ci];
                                      if (kernel->requires_grad)
                                          kernel->grad[static_cast<size_t>(j) * c + ci] +=
                                              g[ci] * x->value[static_cast<size_t>(src) * c + ci];
                                  }
                              }
                          }
                      };
                  });
}

// ---- verification harness ---------------------------------------------------

double grad_check(const std::function<Tensor(const Tensor&)>& f, Tensor x, double h) {
    if (!(h > 0.0 && h <= 1e-2)) throw UsageError("grad_check: h must lie in (0, 1e-2]");

    std::vector<double> analytic(x.size(), 0.0);
    {
        Tape tape;
        TapeScope scope(tape);
        x.zero_grad();
        Tensor y = f(x);
        if (y.size() != 1) throw UsageError("grad_check: f must return a scalar");
        tape.backward(y);
        if (x.has_grad()) analytic = x.grad();
    }

    double worst = 0.0;
    auto& xs = x.mut_data();
    for (size_t i = 0; i < xs.size(); ++i) {
        const double saved = xs[i];
        xs[i] = saved + h;
        const double yp = f(x).item();
        xs[i] = saved - h;
        const double ym = f(x).item();
        xs[i] = saved;
        const double numeric = (yp - ym) / (2.0 * h);
        const double rel = std::fabs(analytic[i] - numeric) / std::max(1.0, std::fabs(analytic[i]));
        worst = std::max(worst, rel);
    }
    return worst;
}

}  // namespace ovf
