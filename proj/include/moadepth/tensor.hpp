#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <string>
#include <vector>

namespace moadepth {

using Shape = std::vector<std::int64_t>;

std::int64_t shape_numel(const Shape& s);
std::string shape_str(const Shape& s);

struct Tensor;
using TensorPtr = std::shared_ptr<Tensor>;

// Dense row-major f64 tensor that doubles as a node in a define-by-run
// reverse-mode graph. The creator edge owns the inputs (shared_ptr), so the
// whole graph is released when the loss tensor goes out of scope.
struct Tensor : std::enable_shared_from_this<Tensor> {
    Shape shape;
    std::vector<double> data;
    bool requires_grad = false;
    std::vector<double> grad;  // empty until backward() touches this node

    struct Node {
        std::string op;
        std::vector<TensorPtr> inputs;
        // Reads this->grad, accumulates into the inputs' grad buffers.
        std::function<void(Tensor&)> backward;
    };
    std::unique_ptr<Node> creator;

    static TensorPtr make(Shape shape, std::vector<double> data, bool requires_grad = false);
    static TensorPtr zeros(Shape shape, bool requires_grad = false);
    static TensorPtr ones(Shape shape, bool requires_grad = false);
    static TensorPtr full(Shape shape, double value, bool requires_grad = false);
    static TensorPtr scalar(double value, bool requires_grad = false);

    std::int64_t numel() const { return static_cast<std::int64_t>(data.size()); }
    bool is_scalar() const { return numel() == 1; }
    std::int64_t rank() const { return static_cast<std::int64_t>(shape.size()); }

    double& at(std::int64_t i) { return data[static_cast<std::size_t>(i)]; }
    double at(std::int64_t i) const { return data[static_cast<std::size_t>(i)]; }
    double& at2(std::int64_t i, std::int64_t j) { return data[i * shape[1] + j]; }
    double at2(std::int64_t i, std::int64_t j) const { return data[i * shape[1] + j]; }

    void ensure_grad();  // allocates a zero grad buffer of matching shape
    void zero_grad();    // drops the grad buffer
};

// ---- primitives -------------------------------------------------------------
// Elementwise binaries follow standard trailing-aligned broadcasting.

TensorPtr add(const TensorPtr& a, const TensorPtr& b);
TensorPtr sub(const TensorPtr& a, const TensorPtr& b);
TensorPtr mul(const TensorPtr& a, const TensorPtr& b);
TensorPtr div(const TensorPtr& a, const TensorPtr& b);

TensorPtr matmul(const TensorPtr& a, const TensorPtr& b);  // [m,k] x [k,n]
TensorPtr transpose2d(const TensorPtr& x);

TensorPtr exp(const TensorPtr& x);
TensorPtr log(const TensorPtr& x);
TensorPtr gelu(const TensorPtr& x);  // exact erf form: x * Phi(x)
TensorPtr relu(const TensorPtr& x);
TensorPtr sigmoid(const TensorPtr& x);
TensorPtr abs(const TensorPtr& x);
TensorPtr square(const TensorPtr& x);

// Over the last axis. tau is a softmax temperature (> 0).
TensorPtr softmax(const TensorPtr& x, double tau = 1.0);
TensorPtr log_softmax(const TensorPtr& x, double tau = 1.0);
TensorPtr layer_norm(const TensorPtr& x, double eps = 1e-12);

TensorPtr sum(const TensorPtr& x);                     // all elements -> scalar
TensorPtr sum(const TensorPtr& x, std::int64_t axis);  // drops the axis
TensorPtr mean(const TensorPtr& x);
TensorPtr mean(const TensorPtr& x, std::int64_t axis);
TensorPtr variance(const TensorPtr& x);  // population convention
TensorPtr variance(const TensorPtr& x, std::int64_t axis);

TensorPtr concat(const std::vector<TensorPtr>& xs, std::int64_t axis);
TensorPtr broadcast_to(const TensorPtr& x, const Shape& target);
TensorPtr reshape(const TensorPtr& x, const Shape& target);
// Rows [start, start+count) of a rank-2 tensor.
TensorPtr slice_rows(const TensorPtr& x, std::int64_t start, std::int64_t count);

TensorPtr avg_pool2d(const TensorPtr& x, std::int64_t kh, std::int64_t kw);
TensorPtr upsample_bilinear2d(const TensorPtr& x, std::int64_t out_h, std::int64_t out_w);

// Convenience wrappers built on the primitives above.
TensorPtr scale(const TensorPtr& x, double c);        // c * x
TensorPtr add_scalar(const TensorPtr& x, double c);   // x + c
TensorPtr neg(const TensorPtr& x);

// ---- generic dispatch --------------------------------------------------------
// Table-driven access to the primitive set, used by the per-primitive gradient
// property suite.

struct Attrs {
    double tau = 1.0;
    double eps = 1e-12;
    std::int64_t axis = 0;
    bool has_axis = false;  // reductions: false = reduce over all elements
    Shape shape;            // broadcast / reshape target
    std::int64_t kh = 1, kw = 1;
    std::int64_t out_h = 0, out_w = 0;
    std::int64_t start = 0, count = 0;  // slice_rows
};

TensorPtr primitive_forward(const std::string& op, const std::vector<TensorPtr>& inputs,
                            const Attrs& attrs = {});
const std::vector<std::string>& primitive_names();

// ---- autodiff ----------------------------------------------------------------

// Seeds d(loss)/d(loss) = 1 and accumulates gradients into every tensor on the
// graph reachable from loss. Gradients add across multiple uses of a tensor.
void backward(const TensorPtr& loss);

// Scoped suppression of graph recording; outputs computed inside the guard
// are plain values. Used by finite differences and evaluation loops.
class NoGradGuard {
public:
    NoGradGuard();
    ~NoGradGuard();
    NoGradGuard(const NoGradGuard&) = delete;
    NoGradGuard& operator=(const NoGradGuard&) = delete;

private:
    bool saved_;
};
bool grad_recording_enabled();

// ---- gradient checking ---------------------------------------------------------

using ScalarFn = std::function<TensorPtr()>;

// Central differences of f with respect to x, element by element. f must
// re-read x->data on every call (define-by-run makes this the natural style).
TensorPtr finite_difference_grad(const ScalarFn& f, const TensorPtr& x, double eps);

struct GradCheckEntry {
    std::string name;
    std::int64_t coords_checked = 0;
    double max_rel_err = 0.0;
    bool pass = false;
};

struct GradReport {
    std::vector<GradCheckEntry> entries;
    bool all_pass = true;
    double worst_rel_err = 0.0;
    std::string worst_name;
};

// Compares backward() against central differences for each named parameter.
// Checks min(numel, max_coords) coordinates per parameter, preferring the
// largest-gradient ones when subsampling; rel err = |a-b|/max(|a|,|b|,1e-12).
GradReport grad_check(const ScalarFn& f,
                      const std::vector<std::pair<std::string, TensorPtr>>& params,
                      double eps = 1e-5, double rel_tol = 1e-4,
                      std::int64_t max_coords = 5);

// ---- seeded fills ---------------------------------------------------------------

struct DistSpec {
    enum class Kind { Uniform, Normal, Zeros, Ones } kind = Kind::Zeros;
    double a = 0.0;  // uniform lower / normal mean
    double b = 1.0;  // uniform upper / normal sigma
    static DistSpec uniform(double lo, double hi) { return {Kind::Uniform, lo, hi}; }
    static DistSpec normal(double mu, double sigma) { return {Kind::Normal, mu, sigma}; }
    static DistSpec zeros() { return {Kind::Zeros, 0, 0}; }
    static DistSpec ones() { return {Kind::Ones, 0, 0}; }
};

TensorPtr seeded_fill(const Shape& shape, std::uint64_t seed, const DistSpec& dist,
                      bool requires_grad = false);

}  // namespace moadepth
