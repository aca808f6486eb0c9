#pragma once

// Small reverse-mode autodiff core: a tape of dense double matrices with the
// handful of primitives the model needs, plus parameters, Adam and a
// finite-difference gradient checker.

#include <algorithm>
#include <array>
#include <cmath>
#include <complex>
#include <cstddef>
#include <deque>
#include <functional>
#include <limits>
#include <map>
#include <memory>
#include <numbers>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include <Eigen/Dense>
#include <json.hpp>

#include "complex_geometry.hpp"
#include "error.hpp"
#include "rng.hpp"

namespace nlaplace::nn {

using Mat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

// ---------------------------------------------------------------------------
// Parameters

struct Param
{
    std::string name;
    Mat value;
    Mat grad;
};

/// Named parameters in insertion order. Addresses are stable under add().
class ParamStore
{
public:
    Param& add(const std::string& name, Eigen::Index rows, Eigen::Index cols)
    {
        if (index_.count(name))
            throw Error("duplicate parameter name '" + name + "'");
        index_[name] = params_.size();
        params_.push_back(Param{name, Mat::Zero(rows, cols), Mat::Zero(rows, cols)});
        return params_.back();
    }

    Param& get(const std::string& name)
    {
        auto it = index_.find(name);
        if (it == index_.end())
            throw Error("unknown parameter '" + name + "'");
        return params_[it->second];
    }
    const Param& get(const std::string& name) const { return const_cast<ParamStore*>(this)->get(name); }
    bool contains(const std::string& name) const { return index_.count(name) != 0; }

    std::size_t size() const { return params_.size(); }
    Param& operator[](std::size_t i) { return params_[i]; }
    const Param& operator[](std::size_t i) const { return params_[i]; }
    auto begin() { return params_.begin(); }
    auto end() { return params_.end(); }
    auto begin() const { return params_.begin(); }
    auto end() const { return params_.end(); }

    std::size_t scalar_count() const
    {
        std::size_t n = 0;
        for (const auto& p : params_)
            n += static_cast<std::size_t>(p.value.size());
        return n;
    }

    void zero_grad()
    {
        for (auto& p : params_)
            p.grad.setZero();
    }

    std::vector<Mat> values() const
    {
        std::vector<Mat> out;
        for (const auto& p : params_)
            out.push_back(p.value);
        return out;
    }

    void set_values(const std::vector<Mat>& values)
    {
        if (values.size() != params_.size())
            throw Error("parameter snapshot size mismatch");
        for (std::size_t i = 0; i < values.size(); ++i) {
            if (values[i].rows() != params_[i].value.rows() || values[i].cols() != params_[i].value.cols())
                throw Error("parameter snapshot shape mismatch for '" + params_[i].name + "'");
            params_[i].value = values[i];
        }
    }

private:
    std::deque<Param> params_;
    std::map<std::string, std::size_t> index_;
};

/// Glorot/Xavier uniform: U(-a, a) with a = sqrt(6 / (fan_in + fan_out)).
inline void glorot_uniform(Param& p, CounterRng& rng)
{
    const double a = std::sqrt(6.0 / static_cast<double>(p.value.rows() + p.value.cols()));
    for (Eigen::Index i = 0; i < p.value.size(); ++i)
        p.value.data()[i] = rng.uniform(-a, a);
}

// ---------------------------------------------------------------------------
// Tape

struct Var
{
    int id = -1;
};

class Tape
{
public:
    using Backward = std::function<void(Tape&, const Mat& out_grad)>;

    Var constant(Mat value, std::string op = "constant") { return push(std::move(value), false, {}, std::move(op)); }

    /// Leaf whose gradient is kept for the caller (read it with grad()).
    Var input(Mat value) { return push(std::move(value), true, {}, "input"); }

    Var param(Param& p)
    {
        Var v = push(p.value, true, {}, "param:" + p.name);
        nodes_[v.id].param = &p;
        return v;
    }

    const Mat& value(Var v) const { return node(v).value; }
    bool requires_grad(Var v) const { return node(v).requires_grad; }

    /// Gradient of the last backward() with respect to v (zero if unreachable).
    const Mat& grad(Var v) const { return node(v).grad; }

    /// Records an op. backward receives the output gradient and must call
    /// accumulate() for the inputs that require gradients.
    Var record(Mat value, std::initializer_list<Var> inputs, Backward backward, std::string op)
    {
        return record(std::move(value), std::span<const Var>(inputs.begin(), inputs.size()),
                      std::move(backward), std::move(op));
    }

    Var record(Mat value, std::span<const Var> inputs, Backward backward, std::string op)
    {
        bool rg = false;
        for (auto in : inputs)
            rg = rg || node(in).requires_grad;
        if (!value.allFinite())
            throw NumericalError("non-finite value produced by op '" + op + "' (node " +
                                 std::to_string(nodes_.size()) + ")");
        return push(std::move(value), rg, rg ? std::move(backward) : Backward{}, std::move(op));
    }

    void accumulate(Var v, const Mat& g)
    {
        auto& n = nodes_.at(v.id);
        if (!n.requires_grad)
            return;
        if (n.grad.size() == 0)
            n.grad = g;
        else
            n.grad += g;
    }

    template <class Expr>
    void accumulate_expr(Var v, const Expr& g)
    {
        auto& n = nodes_.at(v.id);
        if (!n.requires_grad)
            return;
        if (n.grad.size() == 0)
            n.grad = g;
        else
            n.grad += g;
    }

    /// Reverse sweep from a scalar output; parameter gradients are added to Param::grad.
    void backward(Var out) { backward(out, Mat::Ones(1, 1)); }

    void backward(Var out, const Mat& seed)
    {
        if (out.id < 0 || out.id >= static_cast<int>(nodes_.size()))
            throw Error("backward called on a variable that was not recorded by a forward pass");
        const auto& v = node(out).value;
        if (seed.rows() != v.rows() || seed.cols() != v.cols())
            throw Error("backward: seed shape does not match output");
        for (auto& n : nodes_)
            n.grad.resize(0, 0);
        nodes_[out.id].grad = seed;
        for (int i = out.id; i >= 0; --i) {
            auto& n = nodes_[i];
            if (!n.requires_grad || n.grad.size() == 0)
                continue;
            if (n.backward)
                n.backward(*this, n.grad);
            if (n.param)
                n.param->grad += n.grad;
        }
    }

    std::size_t size() const { return nodes_.size(); }

private:
    struct Node
    {
        Mat value;
        Mat grad;
        Backward backward;
        Param* param = nullptr;
        bool requires_grad = false;
        std::string op;
    };

    const Node& node(Var v) const
    {
        if (v.id < 0 || v.id >= static_cast<int>(nodes_.size()))
            throw Error("invalid tape variable");
        return nodes_[v.id];
    }

    Var push(Mat value, bool rg, Backward backward, std::string op)
    {
        nodes_.push_back(Node{std::move(value), Mat{}, std::move(backward), nullptr, rg, std::move(op)});
        return Var{static_cast<int>(nodes_.size()) - 1};
    }

    std::vector<Node> nodes_;
};

// ---------------------------------------------------------------------------
// Primitives

namespace detail {

inline void check_same_shape(const Mat& a, const Mat& b, const char* op)
{
    if (a.rows() != b.rows() || a.cols() != b.cols())
        throw DomainError(std::string(op) + ": shape mismatch (" + std::to_string(a.rows()) + "x" +
                          std::to_string(a.cols()) + " vs " + std::to_string(b.rows()) + "x" +
                          std::to_string(b.cols()) + ")");
}

// 1 - 2 / (e^{2x} + 1) vectorizes through Eigen's exp (std::tanh does not);
// near zero an odd series restores full relative precision.
inline Mat tanh(const Mat& x)
{
    Mat y = (1.0 - 2.0 / ((2.0 * x.array()).exp() + 1.0)).matrix();
    for (Eigen::Index i = 0; i < y.size(); ++i) {
        const double a = x.data()[i];
        if (std::abs(a) < 1e-3) {
            const double a2 = a * a;
            y.data()[i] = a * (1.0 - a2 * (1.0 / 3.0 - a2 * (2.0 / 15.0)));
        }
    }
    return y;
}

inline Mat sigmoid(const Mat& x)
{
    return (1.0 / (1.0 + (-x.array()).exp())).matrix();
}

} // namespace detail

inline Var add(Tape& tp, Var a, Var b)
{
    detail::check_same_shape(tp.value(a), tp.value(b), "add");
    return tp.record(tp.value(a) + tp.value(b), {a, b},
                     [a, b](Tape& t, const Mat& g) {
                         t.accumulate(a, g);
                         t.accumulate(b, g);
                     },
                     "add");
}

inline Var sub(Tape& tp, Var a, Var b)
{
    detail::check_same_shape(tp.value(a), tp.value(b), "sub");
    return tp.record(tp.value(a) - tp.value(b), {a, b},
                     [a, b](Tape& t, const Mat& g) {
                         t.accumulate(a, g);
                         t.accumulate_expr(b, -g);
                     },
                     "sub");
}

inline Var mul(Tape& tp, Var a, Var b)
{
    detail::check_same_shape(tp.value(a), tp.value(b), "mul");
    return tp.record(tp.value(a).cwiseProduct(tp.value(b)), {a, b},
                     [a, b](Tape& t, const Mat& g) {
                         t.accumulate_expr(a, g.cwiseProduct(t.value(b)));
                         t.accumulate_expr(b, g.cwiseProduct(t.value(a)));
                     },
                     "mul");
}

/// scale * a + shift, elementwise with scalar constants.
inline Var affine(Tape& tp, Var a, double scale, double shift = 0.0)
{
    Mat y = (tp.value(a).array() * scale + shift).matrix();
    return tp.record(std::move(y), {a},
                     [a, scale](Tape& t, const Mat& g) { t.accumulate_expr(a, g * scale); }, "affine");
}

inline Var matmul(Tape& tp, Var a, Var b)
{
    const Mat& A = tp.value(a);
    const Mat& B = tp.value(b);
    if (A.cols() != B.rows())
        throw DomainError("matmul: inner dimensions differ");
    return tp.record(A * B, {a, b},
                     [a, b](Tape& t, const Mat& g) {
                         if (t.requires_grad(a))
                             t.accumulate_expr(a, g * t.value(b).transpose());
                         if (t.requires_grad(b))
                             t.accumulate_expr(b, t.value(a).transpose() * g);
                     },
                     "matmul");
}

/// x W + b with x: n x in, W: in x out, b: 1 x out.
inline Var dense(Tape& tp, Var x, Var W, Var b)
{
    const Mat& X = tp.value(x);
    const Mat& Wv = tp.value(W);
    const Mat& bv = tp.value(b);
    if (X.cols() != Wv.rows() || bv.rows() != 1 || bv.cols() != Wv.cols())
        throw DomainError("dense: shape mismatch (input " + std::to_string(X.cols()) + " cols, weight " +
                          std::to_string(Wv.rows()) + "x" + std::to_string(Wv.cols()) + ")");
    Mat y = X * Wv;
    y.rowwise() += bv.row(0);
    return tp.record(std::move(y), {x, W, b},
                     [x, W, b](Tape& t, const Mat& g) {
                         if (t.requires_grad(x))
                             t.accumulate_expr(x, g * t.value(W).transpose());
                         if (t.requires_grad(W))
                             t.accumulate_expr(W, t.value(x).transpose() * g);
                         if (t.requires_grad(b))
                             t.accumulate_expr(b, g.colwise().sum());
                     },
                     "dense");
}

inline Var tanh(Tape& tp, Var a)
{
    Mat y = detail::tanh(tp.value(a));
    const int self = static_cast<int>(tp.size());
    return tp.record(std::move(y), {a},
                     [a, self](Tape& t, const Mat& g) {
                         const Mat& y = t.value(Var{self});
                         t.accumulate_expr(a, (g.array() * (1.0 - y.array().square())).matrix());
                     },
                     "tanh");
}

inline Var sigmoid(Tape& tp, Var a)
{
    Mat y = detail::sigmoid(tp.value(a));
    const int self = static_cast<int>(tp.size());
    return tp.record(std::move(y), {a},
                     [a, self](Tape& t, const Mat& g) {
                         const Mat& y = t.value(Var{self});
                         t.accumulate_expr(a, (g.array() * y.array() * (1.0 - y.array())).matrix());
                     },
                     "sigmoid");
}

/// Horizontal concatenation of matrices with equal row counts.
inline Var concat_cols(Tape& tp, const std::vector<Var>& parts)
{
    if (parts.empty())
        throw DomainError("concat_cols: no inputs");
    const Eigen::Index rows = tp.value(parts[0]).rows();
    Eigen::Index cols = 0;
    for (auto p : parts) {
        if (tp.value(p).rows() != rows)
            throw DomainError("concat_cols: row counts differ");
        cols += tp.value(p).cols();
    }
    Mat y(rows, cols);
    Eigen::Index c = 0;
    for (auto p : parts) {
        y.middleCols(c, tp.value(p).cols()) = tp.value(p);
        c += tp.value(p).cols();
    }
    auto backward = [parts](Tape& t, const Mat& g) {
        Eigen::Index c = 0;
        for (auto p : parts) {
            const auto w = t.value(p).cols();
            if (t.requires_grad(p))
                t.accumulate_expr(p, g.middleCols(c, w));
            c += w;
        }
    };
    return tp.record(std::move(y), std::span<const Var>(parts), backward, "concat_cols");
}

inline Var slice_cols(Tape& tp, Var a, Eigen::Index start, Eigen::Index count)
{
    const Mat& A = tp.value(a);
    if (start < 0 || count < 0 || start + count > A.cols())
        throw DomainError("slice_cols: range out of bounds");
    Mat y = A.middleCols(start, count);
    return tp.record(std::move(y), {a},
                     [a, start, count](Tape& t, const Mat& g) {
                         Mat full = Mat::Zero(t.value(a).rows(), t.value(a).cols());
                         full.middleCols(start, count) = g;
                         t.accumulate(a, full);
                     },
                     "slice_cols");
}

/// Row i of a becomes rows i*k .. i*k+k-1 of the output.
inline Var repeat_rows(Tape& tp, Var a, Eigen::Index k)
{
    const Mat& A = tp.value(a);
    if (k < 1)
        throw DomainError("repeat_rows: k must be >= 1");
    Mat y(A.rows() * k, A.cols());
    for (Eigen::Index i = 0; i < A.rows(); ++i)
        y.middleRows(i * k, k).rowwise() = A.row(i);
    return tp.record(std::move(y), {a},
                     [a, k](Tape& t, const Mat& g) {
                         const Eigen::Index n = t.value(a).rows();
                         Mat acc(n, g.cols());
                         for (Eigen::Index i = 0; i < n; ++i)
                             acc.row(i) = g.middleRows(i * k, k).colwise().sum();
                         t.accumulate(a, acc);
                     },
                     "repeat_rows");
}

inline Var sum(Tape& tp, Var a)
{
    Mat y(1, 1);
    y(0, 0) = tp.value(a).sum();
    return tp.record(std::move(y), {a},
                     [a](Tape& t, const Mat& g) {
                         t.accumulate(a, Mat::Constant(t.value(a).rows(), t.value(a).cols(), g(0, 0)));
                     },
                     "sum");
}

inline Var mean(Tape& tp, Var a)
{
    const double n = static_cast<double>(tp.value(a).size());
    return affine(tp, sum(tp, a), 1.0 / n);
}

/// Mean of squared differences against a constant target.
inline Var mse(Tape& tp, Var pred, const Mat& target)
{
    detail::check_same_shape(tp.value(pred), target, "mse");
    const Mat diff = tp.value(pred) - target;
    Mat y(1, 1);
    y(0, 0) = diff.squaredNorm() / static_cast<double>(diff.size());
    return tp.record(std::move(y), {pred},
                     [pred, diff](Tape& t, const Mat& g) {
                         t.accumulate_expr(pred, diff * (2.0 * g(0, 0) / static_cast<double>(diff.size())));
                     },
                     "mse");
}

/// Standard GRU cell (update z, reset r, candidate n, reset applied after the
/// recurrent matmul). Weight columns are laid out [r | z | n].
///   r = sigmoid(x Wx_r + bx_r + h Wh_r + bh_r)
///   z = sigmoid(x Wx_z + bx_z + h Wh_z + bh_z)
///   n = tanh(x Wx_n + bx_n + r * (h Wh_n + bh_n))
///   h' = (1 - z) * n + z * h
inline Var gru_cell(Tape& tp, Var x, Var h, Var Wx, Var Wh, Var bx, Var bh)
{
    const Mat& X = tp.value(x);
    const Mat& H = tp.value(h);
    const Eigen::Index U = H.cols();
    if (tp.value(Wx).rows() != X.cols() || tp.value(Wx).cols() != 3 * U || tp.value(Wh).rows() != U ||
        tp.value(Wh).cols() != 3 * U || tp.value(bx).cols() != 3 * U || tp.value(bh).cols() != 3 * U ||
        X.rows() != H.rows())
        throw DomainError("gru_cell: shape mismatch");

    Mat gx = X * tp.value(Wx);
    gx.rowwise() += tp.value(bx).row(0);
    Mat gh = H * tp.value(Wh);
    gh.rowwise() += tp.value(bh).row(0);

    auto saved = std::make_shared<std::array<Mat, 4>>();
    {
        auto& [r, z, n, ghn] = *saved;
        r = detail::sigmoid(gx.leftCols(U) + gh.leftCols(U));
        z = detail::sigmoid(gx.middleCols(U, U) + gh.middleCols(U, U));
        ghn = gh.rightCols(U);
        n = detail::tanh(gx.rightCols(U) + r.cwiseProduct(ghn));
    }
    const auto& zs = (*saved)[1];
    const auto& ns = (*saved)[2];
    Mat out = (1.0 - zs.array()) * ns.array() + zs.array() * H.array();

    auto backward = [saved, x, h, Wx, Wh, bx, bh, U](Tape& t, const Mat& g) {
        const auto& [r, z, n, ghn] = *saved;
        const Mat& Hv = t.value(h);
        const Mat dn = (g.array() * (1.0 - z.array()) * (1.0 - n.array().square())).matrix();
        const Mat dz = (g.array() * (Hv.array() - n.array()) * z.array() * (1.0 - z.array())).matrix();
        const Mat dr = (dn.array() * ghn.array() * r.array() * (1.0 - r.array())).matrix();
        Mat dgx(g.rows(), 3 * U), dgh(g.rows(), 3 * U);
        dgx << dr, dz, dn;
        dgh << dr, dz, dn.cwiseProduct(r);
        if (t.requires_grad(x))
            t.accumulate_expr(x, dgx * t.value(Wx).transpose());
        if (t.requires_grad(h))
            t.accumulate_expr(h, (g.cwiseProduct(z) + dgh * t.value(Wh).transpose()));
        if (t.requires_grad(Wx))
            t.accumulate_expr(Wx, t.value(x).transpose() * dgx);
        if (t.requires_grad(Wh))
            t.accumulate_expr(Wh, Hv.transpose() * dgh);
        if (t.requires_grad(bx))
            t.accumulate_expr(bx, dgx.colwise().sum());
        if (t.requires_grad(bh))
            t.accumulate_expr(bh, dgh.colwise().sum());
    };

    return tp.record(std::move(out), {x, h, Wx, Wh, bx, bh}, backward, "gru_cell");
}

/// Complex assembly from sphere angles. theta, phi: n x D.
/// Output n x 2D laid out [Re F_1..Re F_D | Im F_1..Im F_D].
inline Var from_sphere(Tape& tp, Var theta, Var phi)
{
    const Mat& T = tp.value(theta);
    const Mat& P = tp.value(phi);
    detail::check_same_shape(T, P, "from_sphere");
    const Eigen::Index D = T.cols();
    Mat y(T.rows(), 2 * D);
    for (Eigen::Index i = 0; i < T.rows(); ++i)
        for (Eigen::Index d = 0; d < D; ++d) {
            if (!(std::abs(P(i, d)) < std::numbers::pi / 2) || !std::isfinite(T(i, d)))
                throw DomainError("from_sphere: coordinate outside the open sphere domain");
            const Complex s = std::polar(sphere_modulus(P(i, d)), T(i, d));
            y(i, d) = s.real();
            y(i, D + d) = s.imag();
        }
    return tp.record(std::move(y), {theta, phi},
                     [theta, phi, D](Tape& t, const Mat& g) {
                         const Mat& T = t.value(theta);
                         const Mat& P = t.value(phi);
                         Mat gt(T.rows(), D), gp(T.rows(), D);
                         for (Eigen::Index i = 0; i < T.rows(); ++i)
                             for (Eigen::Index d = 0; d < D; ++d) {
                                 const auto J = from_sphere_jacobian({T(i, d), P(i, d)});
                                 const double gre = g(i, d), gim = g(i, D + d);
                                 gt(i, d) = gre * J.dre_dtheta + gim * J.dim_dtheta;
                                 gp(i, d) = gre * J.dre_dphi + gim * J.dim_dphi;
                             }
                         t.accumulate(theta, gt);
                         t.accumulate(phi, gp);
                     },
                     "from_sphere");
}

/// Linear ILT reduction. F: (G*b) x 2D in [Re | Im] layout, weights: one
/// complex weight per row. Output G x D with
///   out(g, d) = sum_k Re(w_k) Re F(gb+k, d) - Im(w_k) Im F(gb+k, d).
inline Var ilt_reduce(Tape& tp, Var F, std::vector<Complex> weights, Eigen::Index group)
{
    const Mat& FV = tp.value(F);
    if (group < 1 || FV.rows() % group != 0 || static_cast<Eigen::Index>(weights.size()) != FV.rows() ||
        FV.cols() % 2 != 0)
        throw DomainError("ilt_reduce: shape mismatch");
    const Eigen::Index D = FV.cols() / 2;
    const Eigen::Index G = FV.rows() / group;
    auto w = std::make_shared<const std::vector<Complex>>(std::move(weights));
    Mat y = Mat::Zero(G, D);
    for (Eigen::Index gi = 0; gi < G; ++gi)
        for (Eigen::Index k = 0; k < group; ++k) {
            const Eigen::Index row = gi * group + k;
            const Complex wk = (*w)[static_cast<std::size_t>(row)];
            y.row(gi) += wk.real() * FV.row(row).leftCols(D) - wk.imag() * FV.row(row).rightCols(D);
        }
    return tp.record(std::move(y), {F},
                     [F, w, group, D, G](Tape& t, const Mat& g) {
                         Mat gf(G * group, 2 * D);
                         for (Eigen::Index gi = 0; gi < G; ++gi)
                             for (Eigen::Index k = 0; k < group; ++k) {
                                 const Eigen::Index row = gi * group + k;
                                 const Complex wk = (*w)[static_cast<std::size_t>(row)];
                                 gf.row(row).leftCols(D) = wk.real() * g.row(gi);
                                 gf.row(row).rightCols(D) = -wk.imag() * g.row(gi);
                             }
                         t.accumulate(F, gf);
                     },
                     "ilt_reduce");
}

// ---------------------------------------------------------------------------
// Adam

struct AdamConfig
{
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
};

struct AdamState
{
    long step = 0;
    std::vector<Mat> m;
    std::vector<Mat> v;
};

/// One bias-corrected Adam update from the accumulated gradients, which are then zeroed.
inline void adam_step(ParamStore& params, AdamState& state, double lr, const AdamConfig& cfg = {})
{
    if (state.m.empty()) {
        for (const auto& p : params) {
            state.m.push_back(Mat::Zero(p.value.rows(), p.value.cols()));
            state.v.push_back(Mat::Zero(p.value.rows(), p.value.cols()));
        }
    }
    if (state.m.size() != params.size())
        throw Error("Adam state does not match the parameter store");
    ++state.step;
    const double c1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(state.step));
    const double c2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(state.step));
    for (std::size_t i = 0; i < params.size(); ++i) {
        auto& p = params[i];
        auto m = state.m[i].array();
        auto v = state.v[i].array();
        const auto g = p.grad.array();
        m = cfg.beta1 * m + (1.0 - cfg.beta1) * g;
        v = cfg.beta2 * v + (1.0 - cfg.beta2) * g.square();
        p.value.array() -= lr * (m / c1) / ((v / c2).sqrt() + cfg.eps);
        p.grad.setZero();
    }
}

// ---------------------------------------------------------------------------
// Gradient check

struct GradCheckResult
{
    double max_relative_error = 0.0;
    std::size_t checked = 0;
    std::size_t dead = 0; // zero analytic and numerical gradient; excluded from the error
    std::string worst;    // "name[index]" of the worst entry
};

/// Builds a scalar loss from the parameters on a fresh tape.
using Program = std::function<Var(Tape&, ParamStore&)>;

/// Compares backward() against central differences for every parameter entry.
inline GradCheckResult grad_check(const Program& program, ParamStore& params, double eps = 1e-6,
                                  double dead_threshold = 1e-12)
{
    if (!(eps >= 1e-7 && eps <= 1e-4))
        throw DomainError("grad_check: eps must lie in [1e-7, 1e-4]");
    params.zero_grad();
    {
        Tape tape;
        Var loss = program(tape, params);
        tape.backward(loss);
    }
    auto eval = [&] {
        Tape tape;
        return tape.value(program(tape, params))(0, 0);
    };
    GradCheckResult res;
    for (auto& p : params) {
        for (Eigen::Index i = 0; i < p.value.size(); ++i) {
            double& w = p.value.data()[i];
            const double saved = w;
            w = saved + eps;
            const double up = eval();
            w = saved - eps;
            const double down = eval();
            w = saved;
            const double numeric = (up - down) / (2.0 * eps);
            const double analytic = p.grad.data()[i];
            const double scale = std::max(std::abs(numeric), std::abs(analytic));
            if (scale < dead_threshold) {
                ++res.dead;
                continue;
            }
            ++res.checked;
            const double rel = std::abs(numeric - analytic) / scale;
            if (rel > res.max_relative_error) {
                res.max_relative_error = rel;
                res.worst = p.name + "[" + std::to_string(i) + "]";
            }
        }
    }
    params.zero_grad();
    return res;
}

// ---------------------------------------------------------------------------
// Serialization helpers

inline nlohmann::json to_json(const Mat& m)
{
    return {{"shape", {m.rows(), m.cols()}},
            {"data", std::vector<double>(m.data(), m.data() + m.size())}};
}

inline Mat mat_from_json(const nlohmann::json& j)
{
    const auto shape = j.at("shape").get<std::vector<Eigen::Index>>();
    const auto data = j.at("data").get<std::vector<double>>();
    if (shape.size() != 2 || shape[0] * shape[1] != static_cast<Eigen::Index>(data.size()))
        throw ConfigError("tensor shape does not match its data length");
    Mat m(shape[0], shape[1]);
    std::copy(data.begin(), data.end(), m.data());
    return m;
}

} // namespace nlaplace::nn
