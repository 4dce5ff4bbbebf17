#pragma once

#include <array>
#include <cstdint>
#include <functional>
#include <memory>
#include <stdexcept>
#include <string>
#include <vector>

namespace anchorseg {

using Shape = std::vector<std::int64_t>;

std::int64_t shape_numel(const Shape& s);
std::string shape_str(const Shape& s);

struct TensorNode;
using NodePtr = std::shared_ptr<TensorNode>;

// One recorded differentiable operation. Nodes carry a monotonically
// increasing sequence number; walking reachable nodes in decreasing
// sequence order is exactly a reverse topological replay of the tape.
struct TensorNode {
    Shape shape;
    std::vector<double> data;
    bool requires_grad = false;
    std::vector<double> grad;  // allocated lazily, same length as data
    std::vector<NodePtr> parents;
    std::function<void(TensorNode&)> backward_fn;  // empty for leaves
    std::uint64_t seq = 0;
    const char* op = "leaf";

    std::int64_t numel() const { return static_cast<std::int64_t>(data.size()); }
    void ensure_grad() {
        if (grad.size() != data.size()) grad.assign(data.size(), 0.0);
    }
};

class TensorError : public std::runtime_error {
public:
    explicit TensorError(const std::string& msg) : std::runtime_error(msg) {}
};

// Value-semantic handle to a tape node.
class Tensor {
public:
    Tensor() = default;
    explicit Tensor(NodePtr n) : node_(std::move(n)) {}

    static Tensor zeros(Shape shape, bool requires_grad = false);
    static Tensor full(Shape shape, double value, bool requires_grad = false);
    static Tensor from_data(Shape shape, std::vector<double> data, bool requires_grad = false);
    static Tensor scalar(double value, bool requires_grad = false);

    bool defined() const { return node_ != nullptr; }
    const Shape& shape() const { return node_->shape; }
    std::size_t ndim() const { return node_->shape.size(); }
    std::int64_t dim(std::size_t i) const { return node_->shape[i]; }
    std::int64_t numel() const { return node_->numel(); }
    bool requires_grad() const { return node_->requires_grad; }

    const std::vector<double>& data() const { return node_->data; }
    std::vector<double>& mutable_data() { return node_->data; }
    const std::vector<double>& grad() const;
    void zero_grad() { if (node_) node_->grad.assign(node_->data.size(), 0.0); }

    double item() const;
    double at(std::initializer_list<std::int64_t> idx) const;

    NodePtr node() const { return node_; }

private:
    NodePtr node_;
};

// ---- elementwise (numpy-style broadcasting) ----
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor div(const Tensor& a, const Tensor& b);

inline Tensor operator+(const Tensor& a, const Tensor& b) { return add(a, b); }
inline Tensor operator-(const Tensor& a, const Tensor& b) { return sub(a, b); }
inline Tensor operator*(const Tensor& a, const Tensor& b) { return mul(a, b); }
inline Tensor operator/(const Tensor& a, const Tensor& b) { return div(a, b); }
inline Tensor operator*(const Tensor& a, double c) { return mul(a, Tensor::scalar(c)); }
inline Tensor operator*(double c, const Tensor& a) { return mul(a, Tensor::scalar(c)); }
inline Tensor operator+(const Tensor& a, double c) { return add(a, Tensor::scalar(c)); }
inline Tensor operator-(const Tensor& a, double c) { return sub(a, Tensor::scalar(c)); }

// ---- unary ----
Tensor neg(const Tensor& a);
Tensor exp(const Tensor& a);
Tensor log(const Tensor& a);
Tensor sin(const Tensor& a);
Tensor cos(const Tensor& a);
Tensor relu(const Tensor& a);
Tensor sigmoid(const Tensor& a);

// ---- reductions ----
Tensor sum(const Tensor& a);                                   // full reduce -> scalar
Tensor sum(const Tensor& a, int axis, bool keepdim = false);
Tensor mean(const Tensor& a);
Tensor mean(const Tensor& a, int axis, bool keepdim = false);
Tensor max_reduce(const Tensor& a, int axis, bool keepdim = false);

// ---- structural ----
Tensor reshape(const Tensor& a, Shape shape);
Tensor permute(const Tensor& a, const std::vector<int>& axes);
Tensor transpose2d(const Tensor& a);
Tensor concat(const std::vector<Tensor>& parts, int axis);
Tensor slice(const Tensor& a, int axis, std::int64_t start, std::int64_t end);
Tensor detach(const Tensor& a);

// ---- linear algebra ----
Tensor matmul(const Tensor& a, const Tensor& b);  // 2-D only

// ---- neural-net primitives ----
Tensor softmax(const Tensor& a, int axis);
// Normalizes along the last axis; gain/bias are 1-D of that axis length.
Tensor layer_norm(const Tensor& a, const Tensor& gain, const Tensor& bias, double eps = 1e-5);

// Bilinear interpolation of a C x h x w map at continuous pixel coordinates
// ((0,0) = top-left pixel center). Out-of-bounds points yield zeros and
// valid=0. Gradients flow to the feature map only, never to coordinates.
struct BilinearResult {
    Tensor values;                  // N x C
    std::vector<std::uint8_t> valid;  // per point
};
BilinearResult bilinear_sample(const Tensor& feat, const std::vector<std::array<double, 2>>& uv);

// ---- composites ----
Tensor softplus(const Tensor& a);          // log(1 + e^x), stable
Tensor abs_(const Tensor& a);
Tensor sqrt_(const Tensor& a);             // requires positive input
Tensor clamp(const Tensor& a, double lo, double hi);

// ---- autodiff driver ----
// Reverse replay of the tape from a scalar loss. Accumulates into .grad of
// every requires_grad tensor reachable from the loss.
void backward(const Tensor& loss);

// Max over coordinates of |analytic - central difference| / max(1, |fd|).
// f must be a pure scalar function of x's data.
double grad_check(const std::function<Tensor(const Tensor&)>& f, Tensor& x, double step = 1e-4);

}  // namespace anchorseg
