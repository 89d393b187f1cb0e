#include "moadepth/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <map>
#include <sstream>
#include <unordered_set>

#include "moadepth/error.hpp"
#include "moadepth/kernels.hpp"
#include "moadepth/rng.hpp"

namespace moadepth {

std::int64_t shape_numel(const Shape& s) {
    std::int64_t n = 1;
    for (std::int64_t d : s) n *= d;
    return n;
}

std::string shape_str(const Shape& s) {
    std::ostringstream os;
    os << '[';
    for (std::size_t i = 0; i < s.size(); ++i) {
        if (i) os << ',';
        os << s[i];
    }
    os << ']';
    return os.str();
}

TensorPtr Tensor::make(Shape shape, std::vector<double> data, bool requires_grad) {
    if (shape_numel(shape) != static_cast<std::int64_t>(data.size())) {
        throw DimensionError("tensor: data length " + std::to_string(data.size()) +
                             " does not match shape " + shape_str(shape));
    }
    auto t = std::make_shared<Tensor>();
    t->shape = std::move(shape);
    t->data = std::move(data);
    t->requires_grad = requires_grad;
    return t;
}

TensorPtr Tensor::zeros(Shape shape, bool requires_grad) {
    const auto n = shape_numel(shape);
    return make(std::move(shape), std::vector<double>(n, 0.0), requires_grad);
}

TensorPtr Tensor::ones(Shape shape, bool requires_grad) {
    const auto n = shape_numel(shape);
    return make(std::move(shape), std::vector<double>(n, 1.0), requires_grad);
}

TensorPtr Tensor::full(Shape shape, double value, bool requires_grad) {
    const auto n = shape_numel(shape);
    return make(std::move(shape), std::vector<double>(n, value), requires_grad);
}

TensorPtr Tensor::scalar(double value, bool requires_grad) {
    return make(Shape{}, {value}, requires_grad);
}

void Tensor::ensure_grad() {
    if (grad.size() != data.size()) grad.assign(data.size(), 0.0);
}

void Tensor::zero_grad() { grad.clear(); }

namespace {

thread_local bool g_grad_recording = true;

std::unique_ptr<Tensor::Node> make_node(std::string op, std::vector<TensorPtr> inputs,
                                        std::function<void(Tensor&)> backward) {
    auto n = std::make_unique<Tensor::Node>();
    n->op = std::move(op);
    n->inputs = std::move(inputs);
    n->backward = std::move(backward);
    return n;
}

}  // namespace

NoGradGuard::NoGradGuard() : saved_(g_grad_recording) { g_grad_recording = false; }
NoGradGuard::~NoGradGuard() { g_grad_recording = saved_; }
bool grad_recording_enabled() { return g_grad_recording; }

namespace {

// ---- broadcasting machinery ----

struct Bcast {
    Shape out;
    std::vector<std::int64_t> sa;  // per-out-dim strides into a (0 where broadcast)
    std::vector<std::int64_t> sb;
};

std::vector<std::int64_t> aligned_strides(const Shape& in, const Shape& out) {
    const std::int64_t r_out = static_cast<std::int64_t>(out.size());
    const std::int64_t r_in = static_cast<std::int64_t>(in.size());
    const std::int64_t off = r_out - r_in;
    std::vector<std::int64_t> native(in.size(), 1);
    for (std::int64_t d = r_in - 2; d >= 0; --d) native[d] = native[d + 1] * in[d + 1];
    std::vector<std::int64_t> s(out.size(), 0);
    for (std::int64_t d = 0; d < r_out; ++d) {
        if (d < off) continue;
        const std::int64_t in_dim = in[d - off];
        s[d] = (in_dim == 1 && out[d] != 1) ? 0 : native[d - off];
    }
    return s;
}

Bcast make_bcast(const Shape& a, const Shape& b, const char* op) {
    const std::size_t r = std::max(a.size(), b.size());
    Shape out(r, 1);
    for (std::size_t d = 0; d < r; ++d) {
        const std::int64_t da = d < r - a.size() ? 1 : a[d - (r - a.size())];
        const std::int64_t db = d < r - b.size() ? 1 : b[d - (r - b.size())];
        if (da != db && da != 1 && db != 1) {
            throw DimensionError(std::string(op) + ": shapes " + shape_str(a) + " and " +
                                 shape_str(b) + " are not broadcast-compatible");
        }
        out[d] = std::max(da, db);
    }
    return {out, aligned_strides(a, out), aligned_strides(b, out)};
}

template <class F>
void bcast_loop(const Shape& out, const std::vector<std::int64_t>& sa,
                const std::vector<std::int64_t>& sb, F&& f) {
    const std::int64_t n = shape_numel(out);
    const std::int64_t r = static_cast<std::int64_t>(out.size());
    if (r == 0) {
        if (n > 0) f(0, 0, 0);
        return;
    }
    std::vector<std::int64_t> idx(r, 0);
    std::int64_t oa = 0, ob = 0;
    for (std::int64_t lin = 0; lin < n; ++lin) {
        f(lin, oa, ob);
        for (std::int64_t d = r - 1; d >= 0; --d) {
            ++idx[d];
            oa += sa[d];
            ob += sb[d];
            if (idx[d] < out[d]) break;
            idx[d] = 0;
            oa -= sa[d] * out[d];
            ob -= sb[d] * out[d];
        }
    }
}

// Generic elementwise binary with broadcasting. da/db compute the local
// gradient contribution from (upstream g, a value, b value, out value).
template <class Fwd, class DA, class DB>
TensorPtr make_binary(const char* name, const TensorPtr& a, const TensorPtr& b,
                      Fwd fwd, DA da, DB db) {
    Bcast bc = make_bcast(a->shape, b->shape, name);
    auto out = Tensor::zeros(bc.out);
    // Fast paths for the hot patterns: equal shapes, scalar rhs, row-vector
    // rhs (bias adds, affine scales), and per-row column rhs (gate weights).
    const std::int64_t n = out->numel();
    const bool same_shape = a->shape == b->shape;
    const bool scalar_b = b->numel() == 1 && bc.out == a->shape;
    const bool rowvec_b = b->rank() == 1 && a->rank() >= 1 && !scalar_b &&
                          a->shape.back() == b->numel() && bc.out == a->shape;
    const bool colvec_b = a->rank() == 2 && b->rank() == 2 && b->shape[1] == 1 &&
                          b->shape[0] == a->shape[0] && bc.out == a->shape;
    if (same_shape) {
        for (std::int64_t i = 0; i < n; ++i) out->data[i] = fwd(a->data[i], b->data[i]);
    } else if (scalar_b) {
        const double bv = b->data[0];
        for (std::int64_t i = 0; i < n; ++i) out->data[i] = fwd(a->data[i], bv);
    } else if (rowvec_b) {
        const std::int64_t cols = b->numel();
        for (std::int64_t i = 0; i < n; ++i) out->data[i] = fwd(a->data[i], b->data[i % cols]);
    } else if (colvec_b) {
        const std::int64_t cols = a->shape[1];
        for (std::int64_t i = 0; i < n; ++i) out->data[i] = fwd(a->data[i], b->data[i / cols]);
    } else {
        bcast_loop(bc.out, bc.sa, bc.sb, [&](std::int64_t lin, std::int64_t oa, std::int64_t ob) {
            out->data[lin] = fwd(a->data[oa], b->data[ob]);
        });
    }
    if (g_grad_recording && (a->requires_grad || b->requires_grad)) {
        out->requires_grad = true;
        out->creator = make_node(name, {a, b},
                                 [a, b, bc, da, db, same_shape, scalar_b, rowvec_b,
                                  colvec_b](Tensor& o) {
            const bool ga = a->requires_grad;
            const bool gb = b->requires_grad;
            if (ga) a->ensure_grad();
            if (gb) b->ensure_grad();
            const std::int64_t n = o.numel();
            if (same_shape) {
                for (std::int64_t i = 0; i < n; ++i) {
                    const double g = o.grad[i];
                    if (ga) a->grad[i] += da(g, a->data[i], b->data[i], o.data[i]);
                    if (gb) b->grad[i] += db(g, a->data[i], b->data[i], o.data[i]);
                }
                return;
            }
            if (scalar_b || rowvec_b || colvec_b) {
                const std::int64_t cols = colvec_b ? a->shape[1] : b->numel();
                for (std::int64_t i = 0; i < n; ++i) {
                    const std::int64_t bi = scalar_b ? 0 : (rowvec_b ? i % cols : i / cols);
                    const double g = o.grad[i];
                    const double av = a->data[i];
                    const double bv = b->data[bi];
                    if (ga) a->grad[i] += da(g, av, bv, o.data[i]);
                    if (gb) b->grad[bi] += db(g, av, bv, o.data[i]);
                }
                return;
            }
            bcast_loop(bc.out, bc.sa, bc.sb,
                       [&](std::int64_t lin, std::int64_t oa, std::int64_t ob) {
                const double g = o.grad[lin];
                const double av = a->data[oa];
                const double bv = b->data[ob];
                const double yv = o.data[lin];
                if (ga) a->grad[oa] += da(g, av, bv, yv);
                if (gb) b->grad[ob] += db(g, av, bv, yv);
            });
        });
    }
    return out;
}

template <class Fwd, class Bwd>
TensorPtr make_unary(const char* name, const TensorPtr& x, Fwd fwd, Bwd bwd) {
    auto out = Tensor::zeros(x->shape);
    const std::int64_t n = x->numel();
    if (n < 16384) {
        for (std::int64_t i = 0; i < n; ++i) out->data[i] = fwd(x->data[i]);
    } else {
        // Element-independent, so threading cannot change the result.
#pragma omp parallel for schedule(static)
        for (std::int64_t i = 0; i < n; ++i) out->data[i] = fwd(x->data[i]);
    }
    if (g_grad_recording && x->requires_grad) {
        out->requires_grad = true;
        out->creator = make_node(name, {x}, [x, bwd](Tensor& o) {
            x->ensure_grad();
            const std::int64_t m = x->numel();
            for (std::int64_t i = 0; i < m; ++i) {
                x->grad[i] += bwd(o.grad[i], x->data[i], o.data[i]);
            }
        });
    }
    return out;
}

void require_rank2(const char* op, const TensorPtr& t) {
    if (t->rank() != 2) {
        throw DimensionError(std::string(op) + ": expected a rank-2 tensor, got " +
                             shape_str(t->shape));
    }
}

constexpr double kInvSqrt2 = 0.70710678118654752440;
constexpr double kInvSqrt2Pi = 0.39894228040143267794;

struct AxisSplit {
    std::int64_t outer, n, inner;
};

AxisSplit split_axis(const char* op, const TensorPtr& x, std::int64_t axis) {
    if (axis < 0 || axis >= x->rank()) {
        throw DimensionError(std::string(op) + ": axis " + std::to_string(axis) +
                             " out of range for " + shape_str(x->shape));
    }
    std::int64_t outer = 1, inner = 1;
    for (std::int64_t d = 0; d < axis; ++d) outer *= x->shape[d];
    for (std::int64_t d = axis + 1; d < x->rank(); ++d) inner *= x->shape[d];
    return {outer, x->shape[axis], inner};
}

Shape drop_axis(const Shape& s, std::int64_t axis) {
    Shape out;
    for (std::int64_t d = 0; d < static_cast<std::int64_t>(s.size()); ++d) {
        if (d != axis) out.push_back(s[d]);
    }
    return out;
}

}  // namespace

// ---- elementwise -----------------------------------------------------------

TensorPtr add(const TensorPtr& a, const TensorPtr& b) {
    return make_binary("add", a, b,
                       [](double x, double y) { return x + y; },
                       [](double g, double, double, double) { return g; },
                       [](double g, double, double, double) { return g; });
}

TensorPtr sub(const TensorPtr& a, const TensorPtr& b) {
    return make_binary("sub", a, b,
                       [](double x, double y) { return x - y; },
                       [](double g, double, double, double) { return g; },
                       [](double g, double, double, double) { return -g; });
}

TensorPtr mul(const TensorPtr& a, const TensorPtr& b) {
    return make_binary("mul", a, b,
                       [](double x, double y) { return x * y; },
                       [](double g, double, double bv, double) { return g * bv; },
                       [](double g, double av, double, double) { return g * av; });
}

TensorPtr div(const TensorPtr& a, const TensorPtr& b) {
    return make_binary("div", a, b,
                       [](double x, double y) { return x / y; },
                       [](double g, double, double bv, double) { return g / bv; },
                       [](double g, double, double bv, double yv) { return -g * yv / bv; });
}

// ---- matmul / transpose ------------------------------------------------------

TensorPtr matmul(const TensorPtr& a, const TensorPtr& b) {
    require_rank2("matmul", a);
    require_rank2("matmul", b);
    if (a->shape[1] != b->shape[0]) {
        throw DimensionError("matmul: incompatible shapes " + shape_str(a->shape) + " x " +
                             shape_str(b->shape));
    }
    const std::int64_t m = a->shape[0], k = a->shape[1], n = b->shape[1];
    auto out = Tensor::zeros({m, n});
    kern::matmul_nn(m, k, n, a->data.data(), b->data.data(), out->data.data());
    if (g_grad_recording && (a->requires_grad || b->requires_grad)) {
        out->requires_grad = true;
        out->creator = make_node("matmul", {a, b}, [a, b, m, k, n](Tensor& o) {
            if (a->requires_grad) {
                a->ensure_grad();
                std::vector<double> tmp(static_cast<std::size_t>(m * k));
                kern::matmul_nt(m, n, k, o.grad.data(), b->data.data(), tmp.data());
                for (std::int64_t i = 0; i < m * k; ++i) a->grad[i] += tmp[i];
            }
            if (b->requires_grad) {
                b->ensure_grad();
                std::vector<double> tmp(static_cast<std::size_t>(k * n));
                kern::matmul_tn(k, m, n, a->data.data(), o.grad.data(), tmp.data());
                for (std::int64_t i = 0; i < k * n; ++i) b->grad[i] += tmp[i];
            }
        });
    }
    return out;
}

TensorPtr transpose2d(const TensorPtr& x) {
    require_rank2("transpose2d", x);
    const std::int64_t r = x->shape[0], c = x->shape[1];
    auto out = Tensor::zeros({c, r});
    for (std::int64_t i = 0; i < r; ++i) {
        for (std::int64_t j = 0; j < c; ++j) out->data[j * r + i] = x->data[i * c + j];
    }
    if (g_grad_recording && (x->requires_grad)) {
        out->requires_grad = true;
        out->creator = make_node("transpose2d", {x}, [x, r, c](Tensor& o) {
            x->ensure_grad();
            for (std::int64_t i = 0; i < r; ++i) {
                for (std::int64_t j = 0; j < c; ++j) x->grad[i * c + j] += o.grad[j * r + i];
            }
        });
    }
    return out;
}

// ---- unary -------------------------------------------------------------------

TensorPtr exp(const TensorPtr& x) {
    return make_unary("exp", x,
                      [](double v) { return std::exp(v); },
                      [](double g, double, double y) { return g * y; });
}

TensorPtr log(const TensorPtr& x) {
    return make_unary("log", x,
                      [](double v) { return std::log(v); },
                      [](double g, double v, double) { return g / v; });
}

TensorPtr gelu(const TensorPtr& x) {
    // Dedicated op instead of make_unary so the forward-pass CDF can be
    // reused in backward (erf is the price of the exact formulation).
    auto out = Tensor::zeros(x->shape);
    auto cdf = std::make_shared<std::vector<double>>(x->data.size());
    const std::int64_t n = x->numel();
    double* cdf_data = cdf->data();
    if (n < 16384) {
        for (std::int64_t i = 0; i < n; ++i) {
            const double c = 0.5 * (1.0 + std::erf(x->data[i] * kInvSqrt2));
            cdf_data[i] = c;
            out->data[i] = x->data[i] * c;
        }
    } else {
#pragma omp parallel for schedule(static)
        for (std::int64_t i = 0; i < n; ++i) {
            const double c = 0.5 * (1.0 + std::erf(x->data[i] * kInvSqrt2));
            cdf_data[i] = c;
            out->data[i] = x->data[i] * c;
        }
    }
    if (g_grad_recording && x->requires_grad) {
        out->requires_grad = true;
        out->creator = make_node("gelu", {x}, [x, cdf](Tensor& o) {
            x->ensure_grad();
            const std::int64_t m = x->numel();
            for (std::int64_t i = 0; i < m; ++i) {
                const double v = x->data[i];
                const double pdf = std::exp(-0.5 * v * v) * kInvSqrt2Pi;
                x->grad[i] += o.grad[i] * ((*cdf)[i] + v * pdf);
            }
        });
    }
    return out;
}

TensorPtr relu(const TensorPtr& x) {
    return make_unary("relu", x,
                      [](double v) { return v > 0.0 ? v : 0.0; },
                      [](double g, double v, double) { return v > 0.0 ? g : 0.0; });
}

TensorPtr sigmoid(const TensorPtr& x) {
    return make_unary("sigmoid", x,
                      [](double v) { return 1.0 / (1.0 + std::exp(-v)); },
                      [](double g, double, double y) { return g * y * (1.0 - y); });
}

TensorPtr abs(const TensorPtr& x) {
    return make_unary("abs", x,
                      [](double v) { return std::fabs(v); },
                      [](double g, double v, double) {
                          return v > 0.0 ? g : (v < 0.0 ? -g : 0.0);
                      });
}

TensorPtr square(const TensorPtr& x) {
    return make_unary("square", x,
                      [](double v) { return v * v; },
                      [](double g, double v, double) { return 2.0 * v * g; });
}

// ---- row-wise (last axis) -------------------------------------------------------

namespace {

struct RowsCols {
    std::int64_t rows, cols;
};

RowsCols last_axis(const char* op, const TensorPtr& x) {
    if (x->rank() < 1) {
        throw DimensionError(std::string(op) + ": needs rank >= 1, got " +
                             shape_str(x->shape));
    }
    const std::int64_t cols = x->shape.back();
    return {x->numel() / cols, cols};
}

}  // namespace

TensorPtr softmax(const TensorPtr& x, double tau) {
    if (!(tau > 0.0)) {
        throw ParameterError("softmax: temperature must be > 0, got " + std::to_string(tau));
    }
    const auto rc = last_axis("softmax", x);
    auto out = Tensor::zeros(x->shape);
    kern::softmax_rows(rc.rows, rc.cols, tau, x->data.data(), out->data.data());
    if (g_grad_recording && (x->requires_grad)) {
        out->requires_grad = true;
        out->creator = make_node("softmax", {x}, [x, rc, tau](Tensor& o) {
            x->ensure_grad();
            std::vector<double> gx(o.data.size());
            kern::softmax_backward_rows(rc.rows, rc.cols, tau, o.data.data(), o.grad.data(),
                                        gx.data());
            for (std::size_t i = 0; i < gx.size(); ++i) x->grad[i] += gx[i];
        });
    }
    return out;
}

TensorPtr log_softmax(const TensorPtr& x, double tau) {
    if (!(tau > 0.0)) {
        throw ParameterError("log_softmax: temperature must be > 0, got " +
                             std::to_string(tau));
    }
    const auto rc = last_axis("log_softmax", x);
    auto out = Tensor::zeros(x->shape);
    kern::log_softmax_rows(rc.rows, rc.cols, tau, x->data.data(), out->data.data());
    if (g_grad_recording && (x->requires_grad)) {
        out->requires_grad = true;
        out->creator = make_node("log_softmax", {x}, [x, rc, tau](Tensor& o) {
            x->ensure_grad();
            std::vector<double> sm(o.data.size());
            for (std::size_t i = 0; i < sm.size(); ++i) sm[i] = std::exp(o.data[i]);
            std::vector<double> gx(o.data.size());
            kern::log_softmax_backward_rows(rc.rows, rc.cols, tau, sm.data(), o.grad.data(),
                                            gx.data());
            for (std::size_t i = 0; i < gx.size(); ++i) x->grad[i] += gx[i];
        });
    }
    return out;
}

TensorPtr layer_norm(const TensorPtr& x, double eps) {
    if (!(eps >= 0.0)) throw ParameterError("layer_norm: eps must be >= 0");
    const auto rc = last_axis("layer_norm", x);
    auto out = Tensor::zeros(x->shape);
    auto rstd = std::make_shared<std::vector<double>>(rc.rows);
    kern::layer_norm_rows(rc.rows, rc.cols, eps, x->data.data(), out->data.data(),
                          rstd->data());
    if (g_grad_recording && (x->requires_grad)) {
        out->requires_grad = true;
        out->creator = make_node("layer_norm", {x}, [x, rc, rstd](Tensor& o) {
            x->ensure_grad();
            std::vector<double> gx(o.data.size());
            kern::layer_norm_backward_rows(rc.rows, rc.cols, o.data.data(), rstd->data(),
                                           o.grad.data(), gx.data());
            for (std::size_t i = 0; i < gx.size(); ++i) x->grad[i] += gx[i];
        });
    }
    return out;
}

// ---- reductions ------------------------------------------------------------------

TensorPtr sum(const TensorPtr& x) {
    double acc = 0.0;
    for (double v : x->data) acc += v;  // fixed left-to-right order
    auto out = Tensor::scalar(acc);
    if (g_grad_recording && (x->requires_grad)) {
        out->requires_grad = true;
        out->creator = make_node("sum", {x}, [x](Tensor& o) {
            x->ensure_grad();
            const double g = o.grad[0];
            for (auto& gv : x->grad) gv += g;
        });
    }
    return out;
}

TensorPtr sum(const TensorPtr& x, std::int64_t axis) {
    const auto sp = split_axis("sum", x, axis);
    auto out = Tensor::zeros(drop_axis(x->shape, axis));
    kern::reduce_sum_axis(sp.outer, sp.n, sp.inner, x->data.data(), out->data.data());
    if (g_grad_recording && (x->requires_grad)) {
        out->requires_grad = true;
        out->creator = make_node("sum", {x}, [x, sp](Tensor& o) {
            x->ensure_grad();
            for (std::int64_t oi = 0; oi < sp.outer; ++oi) {
                for (std::int64_t p = 0; p < sp.n; ++p) {
                    for (std::int64_t ii = 0; ii < sp.inner; ++ii) {
                        x->grad[(oi * sp.n + p) * sp.inner + ii] += o.grad[oi * sp.inner + ii];
                    }
                }
            }
        });
    }
    return out;
}

TensorPtr mean(const TensorPtr& x) {
    const double inv = 1.0 / static_cast<double>(x->numel());
    double acc = 0.0;
    for (double v : x->data) acc += v;
    auto out = Tensor::scalar(acc * inv);
    if (g_grad_recording && (x->requires_grad)) {
        out->requires_grad = true;
        out->creator = make_node("mean", {x}, [x, inv](Tensor& o) {
            x->ensure_grad();
            const double g = o.grad[0] * inv;
            for (auto& gv : x->grad) gv += g;
        });
    }
    return out;
}

TensorPtr mean(const TensorPtr& x, std::int64_t axis) {
    const auto sp = split_axis("mean", x, axis);
    const double inv = 1.0 / static_cast<double>(sp.n);
    auto out = Tensor::zeros(drop_axis(x->shape, axis));
    kern::reduce_sum_axis(sp.outer, sp.n, sp.inner, x->data.data(), out->data.data());
    for (auto& v : out->data) v *= inv;
    if (g_grad_recording && (x->requires_grad)) {
        out->requires_grad = true;
        out->creator = make_node("mean", {x}, [x, sp, inv](Tensor& o) {
            x->ensure_grad();
            for (std::int64_t oi = 0; oi < sp.outer; ++oi) {
                for (std::int64_t p = 0; p < sp.n; ++p) {
                    for (std::int64_t ii = 0; ii < sp.inner; ++ii) {
                        x->grad[(oi * sp.n + p) * sp.inner + ii] +=
                            o.grad[oi * sp.inner + ii] * inv;
                    }
                }
            }
        });
    }
    return out;
}

namespace {

// Population variance over one axis (or the whole tensor when outer=inner=1
// and n=numel). Saves the per-group means for the backward pass.
TensorPtr variance_impl(const TensorPtr& x, const AxisSplit& sp, Shape out_shape) {
    const double inv = 1.0 / static_cast<double>(sp.n);
    auto out = Tensor::zeros(std::move(out_shape));
    auto means = std::make_shared<std::vector<double>>(sp.outer * sp.inner);
    for (std::int64_t oi = 0; oi < sp.outer; ++oi) {
        for (std::int64_t ii = 0; ii < sp.inner; ++ii) {
            const double* base = x->data.data() + oi * sp.n * sp.inner + ii;
            double m = 0.0;
            for (std::int64_t p = 0; p < sp.n; ++p) m += base[p * sp.inner];
            m *= inv;
            double v = 0.0;
            for (std::int64_t p = 0; p < sp.n; ++p) {
                const double d = base[p * sp.inner] - m;
                v += d * d;
            }
            (*means)[oi * sp.inner + ii] = m;
            out->data[oi * sp.inner + ii] = v * inv;
        }
    }
    if (g_grad_recording && (x->requires_grad)) {
        out->requires_grad = true;
        out->creator = make_node("variance", {x}, [x, sp, means, inv](Tensor& o) {
            x->ensure_grad();
            for (std::int64_t oi = 0; oi < sp.outer; ++oi) {
                for (std::int64_t ii = 0; ii < sp.inner; ++ii) {
                    const double g = o.grad[oi * sp.inner + ii];
                    const double m = (*means)[oi * sp.inner + ii];
                    for (std::int64_t p = 0; p < sp.n; ++p) {
                        const std::int64_t off = (oi * sp.n + p) * sp.inner + ii;
                        x->grad[off] += g * 2.0 * (x->data[off] - m) * inv;
                    }
                }
            }
        });
    }
    return out;
}

}  // namespace

TensorPtr variance(const TensorPtr& x) {
    return variance_impl(x, {1, x->numel(), 1}, Shape{});
}

TensorPtr variance(const TensorPtr& x, std::int64_t axis) {
    const auto sp = split_axis("variance", x, axis);
    return variance_impl(x, sp, drop_axis(x->shape, axis));
}

// ---- shape ops -------------------------------------------------------------------

TensorPtr concat(const std::vector<TensorPtr>& xs, std::int64_t axis) {
    if (xs.empty()) throw ParameterError("concat: needs at least one input");
    const std::int64_t r = xs[0]->rank();
    if (axis < 0 || axis >= r) {
        throw DimensionError("concat: axis " + std::to_string(axis) + " out of range for " +
                             shape_str(xs[0]->shape));
    }
    Shape out_shape = xs[0]->shape;
    std::int64_t total = 0;
    for (const auto& t : xs) {
        if (t->rank() != r) {
            throw DimensionError("concat: rank mismatch " + shape_str(xs[0]->shape) + " vs " +
                                 shape_str(t->shape));
        }
        for (std::int64_t d = 0; d < r; ++d) {
            if (d != axis && t->shape[d] != out_shape[d]) {
                throw DimensionError("concat: shape mismatch " + shape_str(xs[0]->shape) +
                                     " vs " + shape_str(t->shape) + " on axis " +
                                     std::to_string(d));
            }
        }
        total += t->shape[axis];
    }
    out_shape[axis] = total;
    auto out = Tensor::zeros(out_shape);

    std::int64_t outer = 1, inner = 1;
    for (std::int64_t d = 0; d < axis; ++d) outer *= out_shape[d];
    for (std::int64_t d = axis + 1; d < r; ++d) inner *= out_shape[d];

    std::int64_t base = 0;
    for (const auto& t : xs) {
        const std::int64_t n_t = t->shape[axis];
        for (std::int64_t oi = 0; oi < outer; ++oi) {
            std::memcpy(out->data.data() + ((oi * total + base) * inner),
                        t->data.data() + (oi * n_t * inner),
                        static_cast<std::size_t>(n_t * inner) * sizeof(double));
        }
        base += n_t;
    }

    bool any_grad = false;
    for (const auto& t : xs) any_grad = any_grad || t->requires_grad;
    if (g_grad_recording && (any_grad)) {
        out->requires_grad = true;
        out->creator = make_node("concat", xs, [xs, outer, inner, total](Tensor& o) {
            std::int64_t base = 0;
            for (const auto& t : xs) {
                const std::int64_t axis_len = t->numel() / (outer * inner);
                if (t->requires_grad) {
                    t->ensure_grad();
                    for (std::int64_t oi = 0; oi < outer; ++oi) {
                        const double* src = o.grad.data() + ((oi * total + base) * inner);
                        double* dst = t->grad.data() + (oi * axis_len * inner);
                        for (std::int64_t i = 0; i < axis_len * inner; ++i) dst[i] += src[i];
                    }
                }
                base += axis_len;
            }
        });
    }
    return out;
}

TensorPtr broadcast_to(const TensorPtr& x, const Shape& target) {
    // Validate via the standard binary rule against the target.
    Bcast bc = make_bcast(x->shape, target, "broadcast");
    if (bc.out != target) {
        throw DimensionError("broadcast: cannot broadcast " + shape_str(x->shape) + " to " +
                             shape_str(target));
    }
    auto out = Tensor::zeros(target);
    bcast_loop(bc.out, bc.sa, bc.sb, [&](std::int64_t lin, std::int64_t oa, std::int64_t) {
        out->data[lin] = x->data[oa];
    });
    if (g_grad_recording && (x->requires_grad)) {
        out->requires_grad = true;
        out->creator = make_node("broadcast", {x}, [x, bc](Tensor& o) {
            x->ensure_grad();
            bcast_loop(bc.out, bc.sa, bc.sb,
                       [&](std::int64_t lin, std::int64_t oa, std::int64_t) {
                x->grad[oa] += o.grad[lin];
            });
        });
    }
    return out;
}

TensorPtr reshape(const TensorPtr& x, const Shape& target) {
    if (shape_numel(target) != x->numel()) {
        throw DimensionError("reshape: cannot reshape " + shape_str(x->shape) + " to " +
                             shape_str(target));
    }
    auto out = Tensor::make(target, x->data);
    if (g_grad_recording && (x->requires_grad)) {
        out->requires_grad = true;
        out->creator = make_node("reshape", {x}, [x](Tensor& o) {
            x->ensure_grad();
            for (std::size_t i = 0; i < o.grad.size(); ++i) x->grad[i] += o.grad[i];
        });
    }
    return out;
}

TensorPtr slice_rows(const TensorPtr& x, std::int64_t start, std::int64_t count) {
    require_rank2("slice_rows", x);
    if (start < 0 || count < 1 || start + count > x->shape[0]) {
        throw DimensionError("slice_rows: range [" + std::to_string(start) + "," +
                             std::to_string(start + count) + ") out of bounds for " +
                             shape_str(x->shape));
    }
    const std::int64_t cols = x->shape[1];
    auto out = Tensor::zeros({count, cols});
    std::memcpy(out->data.data(), x->data.data() + start * cols,
                static_cast<std::size_t>(count * cols) * sizeof(double));
    if (g_grad_recording && (x->requires_grad)) {
        out->requires_grad = true;
        out->creator = make_node("slice_rows", {x}, [x, start, cols](Tensor& o) {
            x->ensure_grad();
            const std::int64_t n = o.numel();
            for (std::int64_t i = 0; i < n; ++i) x->grad[start * cols + i] += o.grad[i];
        });
    }
    return out;
}

// ---- spatial ops ----------------------------------------------------------------

namespace {

struct PlaneView {
    std::int64_t c, h, w;
};

PlaneView plane_view(const char* op, const TensorPtr& x) {
    if (x->rank() == 2) return {1, x->shape[0], x->shape[1]};
    if (x->rank() == 3) return {x->shape[0], x->shape[1], x->shape[2]};
    throw DimensionError(std::string(op) + ": expected rank 2 or 3, got " +
                         shape_str(x->shape));
}

}  // namespace

TensorPtr avg_pool2d(const TensorPtr& x, std::int64_t kh, std::int64_t kw) {
    const auto pv = plane_view("avg_pool2d", x);
    if (kh < 1 || kw < 1) throw ParameterError("avg_pool2d: window must be >= 1");
    if (pv.h % kh != 0 || pv.w % kw != 0) {
        throw DimensionError("avg_pool2d: input " + shape_str(x->shape) +
                             " not divisible by window " + std::to_string(kh) + "x" +
                             std::to_string(kw));
    }
    const std::int64_t oh = pv.h / kh, ow = pv.w / kw;
    Shape out_shape = x->rank() == 2 ? Shape{oh, ow} : Shape{pv.c, oh, ow};
    auto out = Tensor::zeros(out_shape);
    kern::avg_pool2d(pv.c, pv.h, pv.w, kh, kw, x->data.data(), out->data.data());
    if (g_grad_recording && (x->requires_grad)) {
        out->requires_grad = true;
        out->creator = make_node("avg_pool2d", {x}, [x, pv, kh, kw, oh, ow](Tensor& o) {
            x->ensure_grad();
            const double inv = 1.0 / static_cast<double>(kh * kw);
            for (std::int64_t ci = 0; ci < pv.c; ++ci) {
                for (std::int64_t y = 0; y < pv.h; ++y) {
                    for (std::int64_t xx = 0; xx < pv.w; ++xx) {
                        x->grad[(ci * pv.h + y) * pv.w + xx] +=
                            o.grad[(ci * oh + y / kh) * ow + xx / kw] * inv;
                    }
                }
            }
        });
    }
    return out;
}

TensorPtr upsample_bilinear2d(const TensorPtr& x, std::int64_t out_h, std::int64_t out_w) {
    const auto pv = plane_view("upsample_bilinear2d", x);
    if (out_h < pv.h || out_w < pv.w) {
        throw DimensionError("upsample_bilinear2d: target " + std::to_string(out_h) + "x" +
                             std::to_string(out_w) + " smaller than input " +
                             shape_str(x->shape));
    }
    Shape out_shape = x->rank() == 2 ? Shape{out_h, out_w} : Shape{pv.c, out_h, out_w};
    auto out = Tensor::zeros(out_shape);
    kern::upsample_bilinear2d(pv.c, pv.h, pv.w, out_h, out_w, x->data.data(),
                              out->data.data());
    if (g_grad_recording && (x->requires_grad)) {
        out->requires_grad = true;
        out->creator = make_node("upsample_bilinear2d", {x}, [x, pv, out_h, out_w](Tensor& o) {
            x->ensure_grad();
            // Serial scatter keeps the accumulation order fixed.
            const double sy = static_cast<double>(pv.h) / static_cast<double>(out_h);
            const double sx = static_cast<double>(pv.w) / static_cast<double>(out_w);
            for (std::int64_t ci = 0; ci < pv.c; ++ci) {
                double* gin = x->grad.data() + ci * pv.h * pv.w;
                const double* gout = o.grad.data() + ci * out_h * out_w;
                for (std::int64_t oy = 0; oy < out_h; ++oy) {
                    double srcy = (static_cast<double>(oy) + 0.5) * sy - 0.5;
                    if (srcy < 0.0) srcy = 0.0;
                    std::int64_t y0 = std::min<std::int64_t>(
                        static_cast<std::int64_t>(std::floor(srcy)), pv.h - 1);
                    std::int64_t y1 = std::min<std::int64_t>(y0 + 1, pv.h - 1);
                    const double wy = srcy - std::floor(srcy);
                    for (std::int64_t ox = 0; ox < out_w; ++ox) {
                        double srcx = (static_cast<double>(ox) + 0.5) * sx - 0.5;
                        if (srcx < 0.0) srcx = 0.0;
                        std::int64_t x0 = std::min<std::int64_t>(
                            static_cast<std::int64_t>(std::floor(srcx)), pv.w - 1);
                        std::int64_t x1 = std::min<std::int64_t>(x0 + 1, pv.w - 1);
                        const double wx = srcx - std::floor(srcx);
                        const double g = gout[oy * out_w + ox];
                        gin[y0 * pv.w + x0] += g * (1.0 - wy) * (1.0 - wx);
                        gin[y0 * pv.w + x1] += g * (1.0 - wy) * wx;
                        gin[y1 * pv.w + x0] += g * wy * (1.0 - wx);
                        gin[y1 * pv.w + x1] += g * wy * wx;
                    }
                }
            }
        });
    }
    return out;
}

// ---- convenience -----------------------------------------------------------------

TensorPtr scale(const TensorPtr& x, double c) { return mul(x, Tensor::scalar(c)); }
TensorPtr add_scalar(const TensorPtr& x, double c) { return add(x, Tensor::scalar(c)); }
TensorPtr neg(const TensorPtr& x) { return scale(x, -1.0); }

// ---- backward --------------------------------------------------------------------

void backward(const TensorPtr& loss) {
    if (!loss->is_scalar()) {
        throw ContractError("backward: loss must have exactly one element, got shape " +
                            shape_str(loss->shape));
    }
    // Iterative post-order DFS over creator edges.
    std::vector<Tensor*> order;
    std::unordered_set<Tensor*> visited;
    std::vector<std::pair<Tensor*, std::size_t>> stack;
    stack.emplace_back(loss.get(), 0);
    visited.insert(loss.get());
    while (!stack.empty()) {
        auto& [node, next] = stack.back();
        if (node->creator && next < node->creator->inputs.size()) {
            Tensor* child = node->creator->inputs[next].get();
            ++next;
            if (visited.insert(child).second) stack.emplace_back(child, 0);
        } else {
            order.push_back(node);
            stack.pop_back();
        }
    }
    loss->ensure_grad();
    loss->grad[0] = 1.0;
    for (auto it = order.rbegin(); it != order.rend(); ++it) {
        Tensor* t = *it;
        if (!t->creator) continue;
        if (t->grad.empty()) continue;  // no downstream contribution
        t->creator->backward(*t);
    }
}

// ---- finite differences / grad check ------------------------------------------------

namespace {

double eval_scalar(const ScalarFn& f) {
    TensorPtr y = f();
    if (!y->is_scalar()) {
        throw ContractError("finite differences: objective must return a scalar, got " +
                            shape_str(y->shape));
    }
    return y->data[0];
}

}  // namespace

TensorPtr finite_difference_grad(const ScalarFn& f, const TensorPtr& x, double eps) {
    if (!(eps > 0.0)) throw ParameterError("finite_difference_grad: eps must be > 0");
    NoGradGuard no_grad;  // evaluations need values only
    auto out = Tensor::zeros(x->shape);
    for (std::int64_t i = 0; i < x->numel(); ++i) {
        const double saved = x->data[i];
        x->data[i] = saved + eps;
        const double hi = eval_scalar(f);
        x->data[i] = saved - eps;
        const double lo = eval_scalar(f);
        x->data[i] = saved;
        out->data[i] = (hi - lo) / (2.0 * eps);
    }
    return out;
}

GradReport grad_check(const ScalarFn& f,
                      const std::vector<std::pair<std::string, TensorPtr>>& params,
                      double eps, double rel_tol, std::int64_t max_coords) {
    if (!(eps > 0.0)) throw ParameterError("grad_check: eps must be > 0");
    if (!(rel_tol > 0.0)) throw ParameterError("grad_check: rel_tol must be > 0");

    for (const auto& [name, p] : params) {
        (void)name;
        p->zero_grad();
    }
    TensorPtr y = f();
    if (!y->is_scalar()) {
        throw ContractError("grad_check: objective must return a scalar, got " +
                            shape_str(y->shape));
    }
    backward(y);

    GradReport report;
    for (const auto& [name, p] : params) {
        std::vector<double> analytic = p->grad;
        if (analytic.empty()) analytic.assign(p->data.size(), 0.0);

        // When subsampling, prefer the largest-gradient coordinates: central
        // differences against a loss of magnitude L can only resolve
        // gradients above roughly ulp(L)/eps, and a wrong backward formula
        // corrupts large coordinates as much as small ones.
        std::vector<std::int64_t> coords;
        const std::int64_t n = p->numel();
        if (n <= max_coords) {
            coords.resize(n);
            for (std::int64_t i = 0; i < n; ++i) coords[i] = i;
        } else {
            coords.resize(n);
            for (std::int64_t i = 0; i < n; ++i) coords[i] = i;
            std::stable_sort(coords.begin(), coords.end(),
                             [&](std::int64_t a, std::int64_t b) {
                                 return std::fabs(analytic[a]) > std::fabs(analytic[b]);
                             });
            coords.resize(max_coords);
        }

        GradCheckEntry entry;
        entry.name = name;
        entry.coords_checked = static_cast<std::int64_t>(coords.size());
        NoGradGuard no_grad;
        for (std::int64_t i : coords) {
            const double saved = p->data[i];
            p->data[i] = saved + eps;
            const double hi = eval_scalar(f);
            p->data[i] = saved - eps;
            const double lo = eval_scalar(f);
            p->data[i] = saved;
            const double fd = (hi - lo) / (2.0 * eps);
            const double an = analytic[i];
            const double rel =
                std::fabs(an - fd) / std::max({std::fabs(an), std::fabs(fd), 1e-12});
            entry.max_rel_err = std::max(entry.max_rel_err, rel);
        }
        entry.pass = entry.max_rel_err < rel_tol;
        if (!entry.pass) report.all_pass = false;
        if (entry.max_rel_err > report.worst_rel_err) {
            report.worst_rel_err = entry.max_rel_err;
            report.worst_name = name;
        }
        report.entries.push_back(std::move(entry));
    }
    return report;
}

// ---- seeded fills -----------------------------------------------------------------

TensorPtr seeded_fill(const Shape& shape, std::uint64_t seed, const DistSpec& dist,
                      bool requires_grad) {
    const std::int64_t n = shape_numel(shape);
    std::vector<double> data(n);
    switch (dist.kind) {
        case DistSpec::Kind::Zeros:
            break;
        case DistSpec::Kind::Ones:
            std::fill(data.begin(), data.end(), 1.0);
            break;
        case DistSpec::Kind::Uniform: {
            Rng rng(seed);
            for (auto& v : data) v = rng.uniform(dist.a, dist.b);
            break;
        }
        case DistSpec::Kind::Normal: {
            if (dist.b < 0.0) {
                throw ParameterError("seeded_fill: normal sigma must be >= 0, got " +
                                     std::to_string(dist.b));
            }
            Rng rng(seed);
            for (auto& v : data) v = rng.normal(dist.a, dist.b);
            break;
        }
    }
    return Tensor::make(shape, std::move(data), requires_grad);
}

// ---- generic dispatch ---------------------------------------------------------------

TensorPtr primitive_forward(const std::string& op, const std::vector<TensorPtr>& inputs,
                            const Attrs& attrs) {
    auto arg = [&](std::size_t i) -> const TensorPtr& {
        if (i >= inputs.size()) {
            throw ParameterError("primitive_forward: " + op + " missing input " +
                                 std::to_string(i));
        }
        return inputs[i];
    };
    if (op == "add") return add(arg(0), arg(1));
    if (op == "sub") return sub(arg(0), arg(1));
    if (op == "mul") return mul(arg(0), arg(1));
    if (op == "div") return div(arg(0), arg(1));
    if (op == "matmul") return matmul(arg(0), arg(1));
    if (op == "transpose2d") return transpose2d(arg(0));
    if (op == "exp") return exp(arg(0));
    if (op == "log") return log(arg(0));
    if (op == "gelu") return gelu(arg(0));
    if (op == "relu") return relu(arg(0));
    if (op == "sigmoid") return sigmoid(arg(0));
    if (op == "abs") return abs(arg(0));
    if (op == "square") return square(arg(0));
    if (op == "softmax") return softmax(arg(0), attrs.tau);
    if (op == "log_softmax") return log_softmax(arg(0), attrs.tau);
    if (op == "layer_norm") return layer_norm(arg(0), attrs.eps);
    if (op == "sum") return attrs.has_axis ? sum(arg(0), attrs.axis) : sum(arg(0));
    if (op == "mean") return attrs.has_axis ? mean(arg(0), attrs.axis) : mean(arg(0));
    if (op == "variance")
        return attrs.has_axis ? variance(arg(0), attrs.axis) : variance(arg(0));
    if (op == "concat") return concat(inputs, attrs.axis);
    if (op == "broadcast") return broadcast_to(arg(0), attrs.shape);
    if (op == "reshape") return reshape(arg(0), attrs.shape);
    if (op == "slice_rows") return slice_rows(arg(0), attrs.start, attrs.count);
    if (op == "avg_pool2d") return avg_pool2d(arg(0), attrs.kh, attrs.kw);
    if (op == "upsample_bilinear2d")
        return upsample_bilinear2d(arg(0), attrs.out_h, attrs.out_w);
    throw ParameterError("primitive_forward: unknown op '" + op + "'");
}

const std::vector<std::string>& primitive_names() {
    static const std::vector<std::string> names = {
        "add",     "sub",        "mul",        "div",       "matmul",
        "transpose2d", "exp",    "log",        "gelu",      "relu",
        "sigmoid", "abs",        "square",     "softmax",   "log_softmax",
        "layer_norm", "sum",     "mean",       "variance",  "concat",
        "broadcast", "reshape",  "slice_rows", "avg_pool2d", "upsample_bilinear2d"};
    return names;
}

}  // namespace moadepth
