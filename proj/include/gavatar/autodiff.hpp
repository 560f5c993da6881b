#pragma once

// Minimal tape-based reverse-mode automatic differentiation.
//
// Used for the small, branchy parts of the pipeline (skinning, anchor frames,
// mesh extraction and mesh shading) where hand-derived adjoints would be
// error-prone. Dense, data-parallel kernels (MLPs, hash grids, the splat
// rasterizer) carry hand-written backward passes instead.

#include <cmath>
#include <cstdint>
#include <stdexcept>
#include <vector>

namespace gavatar::ad {

class Tape {
public:
    struct Node {
        int32_t lhs = -1;
        int32_t rhs = -1;
        double dlhs = 0.0;
        double drhs = 0.0;
    };

    int32_t push(int32_t lhs, double dlhs, int32_t rhs, double drhs)
    {
        nodes_.push_back({lhs, rhs, dlhs, drhs});
        return static_cast<int32_t>(nodes_.size() - 1);
    }

    int32_t leaf() { return push(-1, 0.0, -1, 0.0); }

    size_t size() const { return nodes_.size(); }

    void clear()
    {
        nodes_.clear();
        adjoint_.clear();
    }

    void reserve(size_t n) { nodes_.reserve(n); }

    // Adds g to the adjoint of node id. Must be called before propagate().
    void seed(int32_t id, double g)
    {
        if (id < 0) return;
        if (adjoint_.size() < nodes_.size()) adjoint_.resize(nodes_.size(), 0.0);
        adjoint_[static_cast<size_t>(id)] += g;
    }

    void propagate()
    {
        adjoint_.resize(nodes_.size(), 0.0);
        for (size_t i = nodes_.size(); i-- > 0;) {
            const double a = adjoint_[i];
            if (a == 0.0) continue;
            const Node& n = nodes_[i];
            if (n.lhs >= 0) adjoint_[static_cast<size_t>(n.lhs)] += n.dlhs * a;
            if (n.rhs >= 0) adjoint_[static_cast<size_t>(n.rhs)] += n.drhs * a;
        }
    }

    double adjoint(int32_t id) const
    {
        if (id < 0 || static_cast<size_t>(id) >= adjoint_.size()) return 0.0;
        return adjoint_[static_cast<size_t>(id)];
    }

    void zero_adjoints() { adjoint_.assign(nodes_.size(), 0.0); }

private:
    std::vector<Node> nodes_;
    std::vector<double> adjoint_;
};

namespace detail {
inline thread_local Tape* active_tape = nullptr;
}

inline Tape& active()
{
    if (!detail::active_tape) throw std::logic_error("ad: no active tape");
    return *detail::active_tape;
}

// RAII activation of a tape on the current thread.
class TapeScope {
public:
    explicit TapeScope(Tape& tape) : previous_(detail::active_tape) { detail::active_tape = &tape; }
    ~TapeScope() { detail::active_tape = previous_; }
    TapeScope(const TapeScope&) = delete;
    TapeScope& operator=(const TapeScope&) = delete;

private:
    Tape* previous_;
};

// A scalar recorded on the active tape. id < 0 marks a constant.
struct Var {
    double val = 0.0;
    int32_t id = -1;

    Var() = default;
    Var(double v) : val(v) {} // NOLINT: implicit constants are the point
    Var(double v, int32_t i) : val(v), id(i) {}

    static Var leaf(double v) { return Var(v, active().leaf()); }
};

inline Var make_unary(double value, const Var& a, double da)
{
    if (a.id < 0) return Var(value);
    return Var(value, active().push(a.id, da, -1, 0.0));
}

inline Var make_binary(double value, const Var& a, double da, const Var& b, double db)
{
    if (a.id < 0 && b.id < 0) return Var(value);
    if (a.id < 0) return Var(value, active().push(b.id, db, -1, 0.0));
    if (b.id < 0) return Var(value, active().push(a.id, da, -1, 0.0));
    return Var(value, active().push(a.id, da, b.id, db));
}

inline Var operator+(const Var& a, const Var& b) { return make_binary(a.val + b.val, a, 1.0, b, 1.0); }
inline Var operator-(const Var& a, const Var& b) { return make_binary(a.val - b.val, a, 1.0, b, -1.0); }
inline Var operator*(const Var& a, const Var& b) { return make_binary(a.val * b.val, a, b.val, b, a.val); }
inline Var operator/(const Var& a, const Var& b)
{
    const double inv = 1.0 / b.val;
    return make_binary(a.val * inv, a, inv, b, -a.val * inv * inv);
}
inline Var operator-(const Var& a) { return make_unary(-a.val, a, -1.0); }

inline Var& operator+=(Var& a, const Var& b) { return a = a + b; }
inline Var& operator-=(Var& a, const Var& b) { return a = a - b; }
inline Var& operator*=(Var& a, const Var& b) { return a = a * b; }
inline Var& operator/=(Var& a, const Var& b) { return a = a / b; }

inline bool operator<(const Var& a, const Var& b) { return a.val < b.val; }
inline bool operator>(const Var& a, const Var& b) { return a.val > b.val; }
inline bool operator<=(const Var& a, const Var& b) { return a.val <= b.val; }
inline bool operator>=(const Var& a, const Var& b) { return a.val >= b.val; }

inline Var sqrt(const Var& a)
{
    const double s = std::sqrt(a.val);
    return make_unary(s, a, 0.5 / s);
}
inline Var exp(const Var& a)
{
    const double e = std::exp(a.val);
    return make_unary(e, a, e);
}
inline Var log(const Var& a) { return make_unary(std::log(a.val), a, 1.0 / a.val); }
inline Var sin(const Var& a) { return make_unary(std::sin(a.val), a, std::cos(a.val)); }
inline Var cos(const Var& a) { return make_unary(std::cos(a.val), a, -std::sin(a.val)); }
inline Var abs(const Var& a) { return make_unary(std::abs(a.val), a, a.val < 0 ? -1.0 : 1.0); }

} // namespace gavatar::ad

namespace gavatar {

inline double value_of(double x) { return x; }
inline double value_of(const ad::Var& x) { return x.val; }

} // namespace gavatar
