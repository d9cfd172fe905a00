#include "dcdm/tensor.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <limits>
#include <sstream>

namespace dcdm {

Shape::Shape(std::initializer_list<std::size_t> dims) : dims_(dims) { validate(); }

Shape::Shape(std::vector<std::size_t> dims) : dims_(std::move(dims)) { validate(); }

void Shape::validate() const {
    if (dims_.empty() || dims_.size() > kMaxRank) {
        throw ShapeError("shape rank must be 1.." + std::to_string(kMaxRank) + ", got " + std::to_string(dims_.size()));
    }
    std::size_t n = 1;
    for (std::size_t d : dims_) {
        if (d == 0) throw ShapeError("shape " + to_string() + " has a zero dimension");
        if (n > std::numeric_limits<std::size_t>::max() / d) throw ShapeError("shape " + to_string() + " overflows");
        n *= d;
    }
}

std::size_t Shape::numel() const {
    if (dims_.empty()) return 0;
    std::size_t n = 1;
    for (std::size_t d : dims_) n *= d;
    return n;
}

std::string Shape::to_string() const {
    std::ostringstream os;
    os << '(';
    for (std::size_t i = 0; i < dims_.size(); ++i) {
        if (i) os << ", ";
        os << dims_[i];
    }
    os << ')';
    return os.str();
}

template <typename T>
Tensor<T>::Tensor(Shape shape, T fill) : shape_(std::move(shape)), data_(shape_.numel(), fill) {}

template <typename T>
Tensor<T>::Tensor(Shape shape, std::vector<T> data) : shape_(std::move(shape)), data_(std::move(data)) {
    if (data_.size() != shape_.numel()) {
        throw ShapeError("tensor data length " + std::to_string(data_.size()) + " does not match shape " +
                         shape_.to_string());
    }
}

template <typename T>
Tensor<T> Tensor<T>::reshaped(Shape shape) const& {
    return Tensor(*this).reshaped(std::move(shape));
}

template <typename T>
Tensor<T> Tensor<T>::reshaped(Shape shape) && {
    if (shape.numel() != data_.size()) {
        throw ShapeError("cannot reshape " + shape_.to_string() + " to " + shape.to_string());
    }
    shape_ = std::move(shape);
    return std::move(*this);
}

template <typename T>
bool Tensor<T>::all_finite() const {
    return std::all_of(data_.begin(), data_.end(), [](T v) { return std::isfinite(v); });
}

template <typename T>
void check_finite(const Tensor<T>& t, const std::string& what) {
    if (!t.all_finite()) throw NumericError(what + " produced a non-finite value");
}

template class Tensor<float>;
template class Tensor<double>;
template void check_finite(const Tensor<float>&, const std::string&);
template void check_finite(const Tensor<double>&, const std::string&);

// ---------------------------------------------------------------------------

namespace {
std::atomic<int> g_default_threads{1};
thread_local int t_thread_override = 0;
}  // namespace

void set_num_threads(int n) { g_default_threads.store(std::max(1, n)); }

int num_threads() { return t_thread_override > 0 ? t_thread_override : g_default_threads.load(); }

ThreadScope::ThreadScope(int n) : previous_(t_thread_override) { t_thread_override = std::max(1, n); }

ThreadScope::~ThreadScope() { t_thread_override = previous_; }

// ---------------------------------------------------------------------------

template <typename T>
Tensor<T> elementwise(const Tensor<T>& x, ElementwiseOp op) {
    Tensor<T> y = x;
    switch (op) {
        case ElementwiseOp::Relu:
            for (T& v : y.data()) v = v > T(0) ? v : T(0);
            break;
        case ElementwiseOp::Clamp01:
            for (T& v : y.data()) v = std::clamp(v, T(0), T(1));
            break;
        default:
            throw std::invalid_argument("elementwise: add/scale need an operand");
    }
    check_finite(y, "elementwise");
    return y;
}

template <typename T>
Tensor<T> elementwise(const Tensor<T>& x, ElementwiseOp op, T scalar) {
    Tensor<T> y = x;
    switch (op) {
        case ElementwiseOp::Add:
            for (T& v : y.data()) v += scalar;
            break;
        case ElementwiseOp::Scale:
            for (T& v : y.data()) v *= scalar;
            break;
        default:
            return elementwise(x, op);
    }
    check_finite(y, "elementwise");
    return y;
}

template <typename T>
Tensor<T> elementwise(const Tensor<T>& x, ElementwiseOp op, const Tensor<T>& operand) {
    if (operand.shape() != x.shape()) {
        throw ShapeError("elementwise: operand shape " + operand.shape().to_string() + " does not match " +
                         x.shape().to_string());
    }
    Tensor<T> y = x;
    auto yd = y.data();
    auto od = operand.data();
    switch (op) {
        case ElementwiseOp::Add:
            for (std::size_t i = 0; i < yd.size(); ++i) yd[i] += od[i];
            break;
        case ElementwiseOp::Scale:
            for (std::size_t i = 0; i < yd.size(); ++i) yd[i] *= od[i];
            break;
        default:
            return elementwise(x, op);
    }
    check_finite(y, "elementwise");
    return y;
}

template Tensor<float> elementwise(const Tensor<float>&, ElementwiseOp);
template Tensor<double> elementwise(const Tensor<double>&, ElementwiseOp);
template Tensor<float> elementwise(const Tensor<float>&, ElementwiseOp, float);
template Tensor<double> elementwise(const Tensor<double>&, ElementwiseOp, double);
template Tensor<float> elementwise(const Tensor<float>&, ElementwiseOp, const Tensor<float>&);
template Tensor<double> elementwise(const Tensor<double>&, ElementwiseOp, const Tensor<double>&);

}  // namespace dcdm
