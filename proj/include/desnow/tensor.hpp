#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <memory>
#include <numeric>
#include <span>
#include <sstream>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

namespace desnow {

/// Base class for every error raised by the library.
class Error : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

class ShapeError : public Error {
public:
    using Error::Error;
};

class NumericError : public Error {
public:
    using Error::Error;
};

class GraphError : public Error {
public:
    using Error::Error;
};

class FormatError : public Error {
public:
    using Error::Error;
};

using Shape = std::vector<std::int64_t>;

inline std::int64_t numel_of(const Shape& shape)
{
    std::int64_t n = 1;
    for (auto e : shape)
        n *= e;
    return n;
}

inline std::string to_string(const Shape& shape)
{
    std::ostringstream os;
    os << '[';
    for (std::size_t i = 0; i < shape.size(); ++i)
        os << (i ? "x" : "") << shape[i];
    os << ']';
    return os.str();
}

/// Accumulator used by reductions and convolution inner loops.
using accum_t = double;

template <class T>
class Tape;

namespace detail {

/// Allocator that leaves trivially constructible elements uninitialised, so
/// op outputs that are fully overwritten skip the zero fill.
template <class T>
struct default_init_allocator : std::allocator<T> {
    template <class U>
    struct rebind {
        using other = default_init_allocator<U>;
    };
    default_init_allocator() = default;
    template <class U>
    default_init_allocator(const default_init_allocator<U>&) noexcept
    {
    }
    template <class U>
    void construct(U* p) noexcept(std::is_nothrow_default_constructible_v<U>)
    {
        ::new (static_cast<void*>(p)) U;
    }
    template <class U, class... Args>
    void construct(U* p, Args&&... args)
    {
        ::new (static_cast<void*>(p)) U(std::forward<Args>(args)...);
    }
};

} // namespace detail

/// Dense row-major tensor with an optional gradient slot.
///
/// A Tensor is a shared handle: copies alias the same storage, which is how
/// the tape keeps intermediate values alive for the backward pass. Use
/// clone() for a deep copy.
template <class T>
class Tensor {
public:
    using value_type = T;

    Tensor() = default;

    explicit Tensor(Shape shape, T fill = T(0))
        : s_(std::make_shared<Storage>())
    {
        validate_shape(shape);
        s_->shape = std::move(shape);
        s_->data.assign(static_cast<std::size_t>(numel_of(s_->shape)), fill);
    }

    Tensor(Shape shape, const std::vector<T>& values)
        : s_(std::make_shared<Storage>())
    {
        validate_shape(shape);
        if (static_cast<std::int64_t>(values.size()) != numel_of(shape))
            throw ShapeError("tensor data length " + std::to_string(values.size()) +
                             " does not match shape " + desnow::to_string(shape));
        s_->shape = std::move(shape);
        s_->data.assign(values.begin(), values.end());
    }

    /// Tensor whose values are unspecified until written.
    static Tensor uninitialized(Shape shape)
    {
        Tensor t;
        validate_shape(shape);
        t.s_ = std::make_shared<Storage>();
        t.s_->data.resize(static_cast<std::size_t>(numel_of(shape)));
        t.s_->shape = std::move(shape);
        return t;
    }

    static Tensor zeros(Shape shape) { return Tensor(std::move(shape), T(0)); }
    static Tensor full(Shape shape, T v) { return Tensor(std::move(shape), v); }
    static Tensor scalar(T v) { return Tensor(Shape{1}, v); }

    bool defined() const noexcept { return static_cast<bool>(s_); }
    const Shape& shape() const { return storage().shape; }
    std::size_t rank() const { return storage().shape.size(); }
    std::int64_t dim(std::size_t i) const { return storage().shape.at(i); }
    std::size_t numel() const { return storage().data.size(); }

    std::span<const T> values() const { return storage().data; }
    std::span<T> mutable_values() { return storage().data; }
    const T* data() const { return storage().data.data(); }
    T* mutable_data() { return storage().data.data(); }
    T operator[](std::size_t i) const { return storage().data[i]; }

    T item() const
    {
        if (numel() != 1)
            throw ShapeError("item() on tensor of shape " + desnow::to_string(shape()));
        return storage().data[0];
    }

    bool requires_grad() const { return storage().requires_grad; }
    Tensor& set_requires_grad(bool on = true)
    {
        storage().requires_grad = on;
        return *this;
    }

    bool has_grad() const { return !storage().grad.empty(); }
    std::span<const T> grad() const { return storage().grad; }

    /// Gradient buffer, allocated as zeros on first access. The gradient slot
    /// is the one part of a tensor that stays writable through const handles.
    std::span<T> mutable_grad() const
    {
        auto& s = storage();
        if (s.grad.empty())
            s.grad.assign(s.data.size(), T(0));
        return s.grad;
    }

    void zero_grad() const
    {
        auto& g = storage().grad;
        std::fill(g.begin(), g.end(), T(0));
    }
    void clear_grad() { storage().grad.clear(); }

    /// Deep copy of values; the copy is a fresh leaf with no gradient.
    Tensor clone() const
    {
        Tensor t = uninitialized(shape());
        std::copy(values().begin(), values().end(), t.mutable_values().begin());
        return t;
    }

    /// Same values, detached from any recorded graph.
    Tensor detach() const { return clone(); }

    Tensor reshape(Shape new_shape) const
    {
        if (numel_of(new_shape) != static_cast<std::int64_t>(numel()))
            throw ShapeError("cannot reshape " + desnow::to_string(shape()) + " to " +
                             desnow::to_string(new_shape));
        Tensor t = uninitialized(std::move(new_shape));
        std::copy(values().begin(), values().end(), t.mutable_values().begin());
        return t;
    }

    template <class U>
    Tensor<U> cast() const
    {
        auto out = Tensor<U>::uninitialized(shape());
        std::transform(values().begin(), values().end(), out.mutable_values().begin(),
                       [](T v) { return static_cast<U>(v); });
        return out;
    }

    bool same_storage(const Tensor& other) const noexcept { return s_ == other.s_; }

private:
    friend class Tape<T>;

    struct Storage {
        Shape shape;
        std::vector<T, detail::default_init_allocator<T>> data;
        std::vector<T> grad;
        bool requires_grad = false;
        std::uint64_t tape_id = 0;
        std::uint64_t tape_generation = 0;
    };

    static void validate_shape(const Shape& shape)
    {
        if (shape.empty())
            throw ShapeError("tensor shape must have at least one extent");
        for (auto e : shape)
            if (e <= 0)
                throw ShapeError("tensor extents must be positive, got " + desnow::to_string(shape));
    }

    Storage& storage() const
    {
        if (!s_)
            throw Error("use of an undefined tensor");
        return *s_;
    }

    std::shared_ptr<Storage> s_;
};

/// Reverse-mode tape. Operations executed while a tape is active (see
/// TapeScope) append their backward closures here when any input requires a
/// gradient. reset() drops the recorded graph between training steps.
template <class T>
class Tape {
public:
    Tape() : id_(next_id()) {}
    Tape(const Tape&) = delete;
    Tape& operator=(const Tape&) = delete;

    static Tape* active() noexcept { return active_slot(); }

    std::size_t size() const noexcept { return entries_.size(); }

    /// Mark `output` as produced on this tape and register its backward rule.
    void record(Tensor<T>& output, std::function<void()> backward_fn)
    {
        auto& s = output.storage();
        s.requires_grad = true;
        s.tape_id = id_;
        s.tape_generation = generation_;
        entries_.push_back(std::move(backward_fn));
    }

    void backward(Tensor<T>& loss)
    {
        if (loss.numel() != 1)
            throw GraphError("backward() requires a scalar loss, got shape " +
                             to_string(loss.shape()));
        auto& s = loss.storage();
        if (s.tape_id != id_ || s.tape_generation != generation_ || entries_.empty())
            throw GraphError("backward() on a tensor with no recorded graph on this tape");
        loss.mutable_grad()[0] += T(1);
        for (auto it = entries_.rbegin(); it != entries_.rend(); ++it)
            (*it)();
    }

    void reset()
    {
        entries_.clear();
        ++generation_;
    }

private:
    static Tape*& active_slot() noexcept
    {
        thread_local Tape* slot = nullptr;
        return slot;
    }
    static std::uint64_t next_id() noexcept
    {
        static std::uint64_t counter = 0;
        return ++counter;
    }

    template <class>
    friend class TapeScope;

    std::vector<std::function<void()>> entries_;
    std::uint64_t id_;
    std::uint64_t generation_ = 1;
};

/// Makes `tape` the recording target for the current thread. A null tape
/// suspends recording.
template <class T>
class TapeScope {
public:
    explicit TapeScope(Tape<T>* tape) : previous_(Tape<T>::active_slot())
    {
        Tape<T>::active_slot() = tape;
    }
    explicit TapeScope(Tape<T>& tape) : TapeScope(&tape) {}
    ~TapeScope() { Tape<T>::active_slot() = previous_; }
    TapeScope(const TapeScope&) = delete;
    TapeScope& operator=(const TapeScope&) = delete;

private:
    Tape<T>* previous_;
};

/// Suspends recording for the current thread (inference, finite differences).
template <class T>
class NoGradScope : public TapeScope<T> {
public:
    NoGradScope() : TapeScope<T>(static_cast<Tape<T>*>(nullptr)) {}
};

/// Branch choices of the piecewise ops: rectifier signs, clamp regions, max
/// winners, pooling argmax and the opaque cut. While a recording log is
/// active each such op appends the choices it made, in execution order. A
/// replaying log forces those same choices, so repeated forward passes stay
/// on one smooth piece of the network (finite differences use this).
class BranchLog {
public:
    bool replaying() const noexcept { return replay_; }

    /// Switches to replay, starting again from the first recorded op.
    void rewind()
    {
        replay_ = true;
        cursor_ = 0;
    }

    std::span<std::uint32_t> next(std::size_t n)
    {
        if (!replay_)
            return slots_.emplace_back(n, 0u);
        if (cursor_ >= slots_.size() || slots_[cursor_].size() != n)
            throw GraphError("branch log replay does not match the recorded graph");
        return slots_[cursor_++];
    }

    static BranchLog*& active() noexcept
    {
        thread_local BranchLog* slot = nullptr;
        return slot;
    }

private:
    std::vector<std::vector<std::uint32_t>> slots_;
    std::size_t cursor_ = 0;
    bool replay_ = false;
};

class BranchScope {
public:
    explicit BranchScope(BranchLog& log) : previous_(BranchLog::active()) { BranchLog::active() = &log; }
    ~BranchScope() { BranchLog::active() = previous_; }
    BranchScope(const BranchScope&) = delete;
    BranchScope& operator=(const BranchScope&) = delete;

private:
    BranchLog* previous_;
};

namespace detail {

/// Per-op view of the active BranchLog. Without a log, choose() simply
/// evaluates the natural choice.
struct Branches {
    std::uint32_t* slot = nullptr;
    bool replay = false;

    template <class F>
    std::uint32_t choose(std::size_t i, F&& natural) const
    {
        if (!slot)
            return static_cast<std::uint32_t>(natural());
        if (replay)
            return slot[i];
        return slot[i] = static_cast<std::uint32_t>(natural());
    }
};

inline Branches branches(std::size_t n)
{
    auto* log = BranchLog::active();
    if (!log)
        return {};
    return {log->next(n).data(), log->replaying()};
}

} // namespace detail

namespace detail {

template <class T>
bool any_requires_grad(std::initializer_list<const Tensor<T>*> inputs)
{
    for (auto* t : inputs)
        if (t && t->defined() && t->requires_grad())
            return true;
    return false;
}

/// Tape to record on for an op with these inputs, or nullptr.
template <class T>
Tape<T>* recording_tape(std::initializer_list<const Tensor<T>*> inputs)
{
    auto* tape = Tape<T>::active();
    if (!tape)
        return nullptr;
    return any_requires_grad<T>(inputs) ? tape : nullptr;
}

template <class T>
void check_finite(const Tensor<T>& t, const char* op)
{
    for (T v : t.values())
        if (!std::isfinite(v))
            throw NumericError(std::string("non-finite value produced by ") + op);
}

template <class T>
void require_same_shape(const Tensor<T>& a, const Tensor<T>& b, const char* op)
{
    if (a.shape() != b.shape())
        throw ShapeError(std::string(op) + ": shape mismatch " + to_string(a.shape()) + " vs " +
                         to_string(b.shape()));
}

} // namespace detail
} // namespace desnow
