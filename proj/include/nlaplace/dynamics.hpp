#pragma once

// Benchmark dynamical systems and dataset generation.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <functional>
#include <numbers>
#include <optional>
#include <span>
#include <sstream>
#include <string>
#include <string_view>
#include <vector>

#include <Eigen/Dense>
#include <json.hpp>

#include "error.hpp"
#include "rng.hpp"
#include "util.hpp"

namespace nlaplace::dynamics {

using Vec = Eigen::VectorXd;
using json = nlohmann::json;

inline constexpr int kDatasetFormatVersion = 1;

enum class SystemKind
{
    SpiralDDE,
    LotkaVolterraDDE,
    MackeyGlassDDE,
    StiffVanDerPol,
    ForcedODE,
    IntegroDE,
    Sine,
    Square,
    Sawtooth,
};

inline constexpr std::array kAllSystems = {
    SystemKind::SpiralDDE, SystemKind::LotkaVolterraDDE, SystemKind::MackeyGlassDDE,
    SystemKind::StiffVanDerPol, SystemKind::ForcedODE, SystemKind::IntegroDE,
    SystemKind::Sine, SystemKind::Square, SystemKind::Sawtooth,
};

inline std::string_view system_name(SystemKind k)
{
    switch (k) {
    case SystemKind::SpiralDDE: return "spiral_dde";
    case SystemKind::LotkaVolterraDDE: return "lotka_volterra_dde";
    case SystemKind::MackeyGlassDDE: return "mackey_glass_dde";
    case SystemKind::StiffVanDerPol: return "stiff_van_der_pol";
    case SystemKind::ForcedODE: return "forced_ode";
    case SystemKind::IntegroDE: return "integro_de";
    case SystemKind::Sine: return "sine";
    case SystemKind::Square: return "square";
    case SystemKind::Sawtooth: return "sawtooth";
    }
    return "unknown";
}

inline SystemKind parse_system(std::string_view name)
{
    for (auto k : kAllSystems)
        if (system_name(k) == name)
            return k;
    std::string known;
    for (auto k : kAllSystems)
        known += (known.empty() ? "" : ", ") + std::string(system_name(k));
    throw ConfigError("unknown system '" + std::string(name) + "' (known: " + known + ")");
}

inline int state_dim(SystemKind k)
{
    switch (k) {
    case SystemKind::SpiralDDE:
    case SystemKind::LotkaVolterraDDE: return 2;
    default: return 1;
    }
}

/// System constants. Unused fields are ignored for a given kind.
struct SystemSpec
{
    SystemKind kind = SystemKind::SpiralDDE;
    double tau = 2.5;
    std::array<double, 4> A{-1.0, 1.0, -1.0, -1.0}; // row-major 2x2
    double mu = 1000.0;
    double beta = 0.25;
    double gamma = 0.1;
    double n = 10.0;

    static SystemSpec defaults(SystemKind kind)
    {
        SystemSpec s;
        s.kind = kind;
        switch (kind) {
        case SystemKind::LotkaVolterraDDE: s.tau = 0.1; break;
        case SystemKind::MackeyGlassDDE: s.tau = 10.0; break;
        default: break;
        }
        return s;
    }

    json to_json() const
    {
        json j{{"kind", system_name(kind)}};
        switch (kind) {
        case SystemKind::SpiralDDE: j["tau"] = tau; j["A"] = A; break;
        case SystemKind::LotkaVolterraDDE: j["tau"] = tau; break;
        case SystemKind::MackeyGlassDDE:
            j["tau"] = tau; j["beta"] = beta; j["gamma"] = gamma; j["n"] = n;
            break;
        case SystemKind::StiffVanDerPol: j["mu"] = mu; break;
        default: break;
        }
        return j;
    }

    static SystemSpec from_json(const json& j)
    {
        auto s = defaults(parse_system(j.at("kind").get<std::string>()));
        s.tau = j.value("tau", s.tau);
        if (j.contains("A"))
            s.A = j.at("A").get<std::array<double, 4>>();
        s.mu = j.value("mu", s.mu);
        s.beta = j.value("beta", s.beta);
        s.gamma = j.value("gamma", s.gamma);
        s.n = j.value("n", s.n);
        return s;
    }
};

struct Trajectory
{
    int id = 0;
    std::vector<double> times;
    std::vector<std::vector<double>> states; // |times| x D
    json init;

    std::size_t dim() const { return states.empty() ? 0 : states.front().size(); }
};

// ---------------------------------------------------------------------------
// Delay differential equations: method of steps with RK4 and a dense cubic
// Hermite interpolant of the computed solution.

/// dx/dt = rhs(t, x(t), x(t - tau)).
struct DdeProblem
{
    int dim = 1;
    double tau = 1.0;
    double t0 = 0.0;
    std::function<void(double t, const Vec& x, const Vec& xd, Vec& dx)> rhs;
    /// History for t <= t0; left_limit asks for lim_{u -> t-} at jump points.
    std::function<Vec(double t, bool left_limit)> history;
    /// Jump locations of the history function (each propagates to d + k tau).
    std::vector<double> history_jumps;
};

struct DdeOptions
{
    int min_steps = 2000;
};

/// Dense solution; keeps a pointer to its problem, which must outlive it.
class DdeSolution
{
public:
    DdeSolution(const DdeProblem& problem)
        : problem_(&problem)
    {
    }

    double t0() const { return problem_->t0; }
    double t_end() const { return nodes_.empty() ? problem_->t0 : nodes_.back(); }
    std::size_t steps() const { return segments_.size(); }

    /// Solution value; history for t <= t0.
    Vec eval(double t, bool left_limit = false) const
    {
        if (t < problem_->t0 || (t == problem_->t0 && left_limit) || segments_.empty())
            return problem_->history(t, left_limit);
        if (t > nodes_.back() + 1e-12 * std::max(1.0, std::abs(nodes_.back())))
            throw Error("DDE lookup at t = " + std::to_string(t) + " ahead of the computed solution (" +
                        std::to_string(nodes_.back()) + ")");
        auto it = std::upper_bound(nodes_.begin(), nodes_.end(), t);
        std::size_t i = static_cast<std::size_t>(std::max<std::ptrdiff_t>(0, it - nodes_.begin() - 1));
        i = std::min(i, segments_.size() - 1);
        const auto& s = segments_[i];
        const double h = s.tb - s.ta;
        const double u = std::clamp((t - s.ta) / h, 0.0, 1.0);
        // Hermite basis with h00 + h01 = 1 folded in, so constants are reproduced exactly
        const double h10 = u * (1 - u) * (1 - u);
        const double h01 = u * u * (3 - 2 * u);
        const double h11 = u * u * (u - 1);
        return s.xa + h01 * (s.xb - s.xa) + (h10 * h) * s.fa + (h11 * h) * s.fb;
    }

    void push(double ta, double tb, Vec xa, Vec xb, Vec fa, Vec fb)
    {
        if (nodes_.empty())
            nodes_.push_back(ta);
        nodes_.push_back(tb);
        segments_.push_back({ta, tb, std::move(xa), std::move(xb), std::move(fa), std::move(fb)});
    }

private:
    struct Segment
    {
        double ta, tb;
        Vec xa, xb, fa, fb;
    };
    const DdeProblem* problem_;
    std::vector<double> nodes_;
    std::vector<Segment> segments_;
};

/// Step mesh on [t0, t_end]: uniform spacing h = tau / m with at least
/// min_steps steps, split at propagated history jumps d + k tau.
inline std::vector<double> dde_mesh(const DdeProblem& p, double t_end, const DdeOptions& opt)
{
    if (!(p.tau > 0.0))
        throw DomainError("DDE delay must be positive");
    if (!(t_end > p.t0))
        throw DomainError("DDE interval must be non-empty");
    const double h0 = (t_end - p.t0) / opt.min_steps;
    const double m = std::ceil(p.tau / h0 - 1e-9);
    const double h = p.tau / m;

    std::vector<double> breaks;
    for (double d : p.history_jumps)
        for (double k = 1;; ++k) {
            const double b = d + k * p.tau;
            if (b >= t_end)
                break;
            if (b > p.t0)
                breaks.push_back(b);
        }
    std::sort(breaks.begin(), breaks.end());

    const auto steps = static_cast<long>(std::ceil((t_end - p.t0) / h - 1e-9));
    std::vector<double> mesh;
    for (long j = 0; j <= steps; ++j) {
        const double t = std::min(p.t0 + static_cast<double>(j) * h, t_end);
        const bool near_break = std::any_of(breaks.begin(), breaks.end(),
                                            [&](double b) { return std::abs(b - t) < 0.1 * h; });
        if (!near_break || j == 0 || j == steps)
            mesh.push_back(t);
    }
    mesh.insert(mesh.end(), breaks.begin(), breaks.end());
    std::sort(mesh.begin(), mesh.end());
    mesh.erase(std::unique(mesh.begin(), mesh.end(),
                           [&](double a, double b) { return std::abs(a - b) < 1e-9 * h; }),
               mesh.end());
    return mesh;
}

inline DdeSolution integrate_dde(const DdeProblem& p, double t_end, const DdeOptions& opt = {})
{
    const auto mesh = dde_mesh(p, t_end, opt);
    DdeSolution sol(p);
    Vec x = p.history(p.t0, false);
    if (x.size() != p.dim)
        throw DomainError("DDE history has the wrong dimension");

    Vec k1(p.dim), k2(p.dim), k3(p.dim), k4(p.dim), fb(p.dim);
    // Delayed times that round to within a few ulps of a history jump are
    // snapped onto it, so the one-sided limit selects the intended branch.
    auto delayed = [&](double t, bool left) {
        double u = t - p.tau;
        for (double d : p.history_jumps)
            if (std::abs(u - d) <= 1e-9 * std::max(1.0, std::abs(d)))
                u = d;
        return sol.eval(u, left);
    };
    for (std::size_t i = 0; i + 1 < mesh.size(); ++i) {
        const double ta = mesh[i];
        const double tb = mesh[i + 1];
        const double h = tb - ta;
        if (h > p.tau * (1.0 + 1e-12))
            throw Error("DDE mesh step exceeds the delay");
        p.rhs(ta, x, delayed(ta, false), k1);
        const double tm = ta + 0.5 * h;
        p.rhs(tm, x + 0.5 * h * k1, delayed(tm, false), k2);
        p.rhs(tm, x + 0.5 * h * k2, delayed(tm, false), k3);
        p.rhs(tb, x + h * k3, delayed(tb, true), k4);
        Vec xb = x + (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4);
        p.rhs(tb, xb, delayed(tb, true), fb);
        if (!xb.allFinite())
            throw NumericalError("DDE solution became non-finite at t = " + std::to_string(tb));
        sol.push(ta, tb, x, xb, k1, fb);
        x = std::move(xb);
    }
    return sol;
}

inline DdeProblem spiral_dde(const SystemSpec& s, const Vec& history)
{
    const auto A = s.A;
    return {2, s.tau, 0.0,
            [A](double, const Vec& x, const Vec& xd, Vec& dx) {
                const double u = std::tanh(x[0] + xd[0]);
                const double v = std::tanh(x[1] + xd[1]);
                dx[0] = A[0] * u + A[1] * v;
                dx[1] = A[2] * u + A[3] * v;
            },
            [history](double, bool) { return history; },
            {}};
}

inline DdeProblem lotka_volterra_dde(const SystemSpec& s, const Vec& history)
{
    return {2, s.tau, 0.0,
            [](double, const Vec& x, const Vec& xd, Vec& dx) {
                dx[0] = 0.5 * x[0] * (1.0 - xd[1]);
                dx[1] = 0.5 * x[1] * (1.0 - xd[0]);
            },
            [history](double, bool) { return history; },
            {}};
}

inline constexpr double kMackeyHistoryLow = -1.0;
inline constexpr double kMackeyHistoryHigh = 1.1;
inline constexpr double kMackeyStart = 10.0;
inline constexpr double kMackeyEnd = 100.0;

/// History -1 on [0, c), 1.1 on [c, 10]; integration starts at t = 10.
inline DdeProblem mackey_glass_dde(const SystemSpec& s, double switch_time)
{
    const double beta = s.beta, gamma = s.gamma, n = s.n;
    return {1, s.tau, kMackeyStart,
            [beta, gamma, n](double, const Vec& x, const Vec& xd, Vec& dx) {
                dx[0] = beta * xd[0] / (1.0 + std::pow(xd[0], n)) - gamma * x[0];
            },
            [switch_time](double t, bool left) {
                const bool high = left ? t > switch_time : t >= switch_time;
                return Vec::Constant(1, high ? kMackeyHistoryHigh : kMackeyHistoryLow);
            },
            {switch_time}};
}

/// Hutchinson logistic DDE x' = a x(t) (1 - x(t - tau)) with constant history.
inline DdeProblem hutchinson_dde(double a, double tau, double history)
{
    return {1, tau, 0.0,
            [a](double, const Vec& x, const Vec& xd, Vec& dx) { dx[0] = a * x[0] * (1.0 - xd[0]); },
            [history](double, bool) { return Vec::Constant(1, history); },
            {}};
}

inline std::vector<std::vector<double>> sample(const DdeSolution& sol, std::span<const double> times)
{
    std::vector<std::vector<double>> out;
    for (double t : times) {
        const Vec v = sol.eval(t);
        out.emplace_back(v.data(), v.data() + v.size());
    }
    return out;
}

/// Integrates a DDE kind with constant history and samples it at the given times.
inline Trajectory solve_dde(const SystemSpec& spec, const Vec& history, std::span<const double> times,
                            const DdeOptions& opt = {})
{
    DdeProblem p;
    switch (spec.kind) {
    case SystemKind::SpiralDDE: p = spiral_dde(spec, history); break;
    case SystemKind::LotkaVolterraDDE: p = lotka_volterra_dde(spec, history); break;
    default: throw DomainError("solve_dde: constant-history DDE kind required");
    }
    if (history.size() != p.dim)
        throw DomainError("solve_dde: history dimension mismatch");
    const double t_end = std::max(times.empty() ? p.t0 + p.tau : times.back(), p.t0 + p.tau);
    const auto sol = integrate_dde(p, t_end, opt);
    Trajectory tr;
    tr.times.assign(times.begin(), times.end());
    tr.states = sample(sol, times);
    return tr;
}

// ---------------------------------------------------------------------------
// Stiff ODE: TR-BDF2 (trapezoidal stage followed by BDF2) with an embedded
// error estimate, modified Newton iteration and analytic Jacobian.

struct StiffOptions
{
    double atol = 1e-8;
    double rtol = 1e-6;
    double h_initial = 1e-4;
    double h_min = 1e-14;
    long max_steps = 10'000'000;
};

struct StiffStats
{
    long accepted = 0;
    long rejected = 0;
    long newton_failures = 0;
};

using OdeRhs = std::function<void(double t, const Vec& y, Vec& dy)>;
using OdeJac = std::function<void(double t, const Vec& y, Eigen::MatrixXd& J)>;

/// Solution at each output time (ascending, >= t0).
inline std::vector<Vec> solve_trbdf2(const OdeRhs& f, const OdeJac& jac, Vec y, double t0,
                                     std::span<const double> out_times, const StiffOptions& opt = {},
                                     StiffStats* stats = nullptr)
{
    const double gamma = 2.0 - std::sqrt(2.0);
    const double d = gamma / 2.0;
    const double w = std::sqrt(2.0) / 4.0;
    // Third-order quadrature on nodes {0, gamma, 1} for the error estimate.
    const double qb = 1.0 / (6.0 * gamma * (1.0 - gamma));
    const double qc = (1.0 / 3.0 - gamma / 2.0) / (1.0 - gamma);
    const double qa = 1.0 - qb - qc;
    const double e0 = w - qa, e1 = w - qb, e2 = d - qc;

    const auto n = y.size();
    StiffStats local;
    StiffStats& st = stats ? *stats : local;
    std::vector<Vec> out;
    out.reserve(out_times.size());
    double t = t0;
    double h = opt.h_initial;
    Vec fn(n), fz(n), f1(n), tmp(n);
    Eigen::MatrixXd J(n, n);

    auto scale = [&](const Vec& a, const Vec& b) {
        return (opt.atol + opt.rtol * a.cwiseAbs().cwiseMax(b.cwiseAbs()).array()).matrix();
    };

    std::size_t next = 0;
    while (next < out_times.size() && out_times[next] <= t0)
        out.push_back(y), ++next;

    f(t, y, fn);
    while (next < out_times.size()) {
        if (st.accepted + st.rejected > opt.max_steps)
            throw NumericalError("TR-BDF2: step budget exhausted at t = " + std::to_string(t));
        const double target = out_times[next];
        bool hit = false;
        double step = h;
        if (t + step >= target - 1e-12 * std::abs(target)) {
            step = target - t;
            hit = true;
        }
        jac(t, y, J);
        const Eigen::MatrixXd M = Eigen::MatrixXd::Identity(n, n) - d * step * J;
        const Eigen::PartialPivLU<Eigen::MatrixXd> lu(M);

        // Solve u - d*step*f(tu, u) = rhs by modified Newton.
        auto newton = [&](double tu, const Vec& rhs, Vec& u, Vec& fu) {
            const Vec sc = scale(u, y);
            for (int it = 0; it < 10; ++it) {
                f(tu, u, fu);
                const Vec res = rhs - u + d * step * fu;
                const Vec du = lu.solve(res);
                u += du;
                if (!u.allFinite())
                    return false;
                if ((du.array() / sc.array()).abs().maxCoeff() < 1e-3) {
                    f(tu, u, fu);
                    return true;
                }
            }
            return false;
        };

        Vec z = y + gamma * step * fn;
        bool ok = newton(t + gamma * step, y + d * step * fn, z, fz);
        Vec y1 = z;
        if (ok) {
            y1 = y + step * (fn + fz) * 0.5; // predictor
            ok = newton(t + step, y + w * step * (fn + fz), y1, f1);
        }
        if (!ok) {
            ++st.newton_failures;
            ++st.rejected;
            h = 0.5 * step;
            if (h < opt.h_min)
                throw NumericalError("TR-BDF2: Newton failed to converge at t = " + std::to_string(t) +
                                     " with step at the floor");
            continue;
        }
        const Vec est = lu.solve(step * (e0 * fn + e1 * fz + e2 * f1));
        const double err = (est.array() / scale(y, y1).array()).abs().maxCoeff();
        const double factor = std::min(5.0, std::max(0.2, 0.9 * std::pow(std::max(err, 1e-16), -1.0 / 3.0)));
        if (err > 1.0) {
            ++st.rejected;
            h = step * std::min(factor, 0.9);
            if (h < opt.h_min)
                throw NumericalError("TR-BDF2: step size underflow at t = " + std::to_string(t));
            continue;
        }
        ++st.accepted;
        t = hit ? target : t + step;
        y = y1;
        fn = f1;
        if (hit) {
            out.push_back(y);
            ++next;
            h = std::max(h, step * factor); // a clipped step says nothing about the natural size
        } else {
            h = step * factor;
        }
    }
    return out;
}

/// Van der Pol oscillator x' = y, y' = mu (1 - x^2) y - x.
inline std::vector<Vec> solve_van_der_pol(double mu, double x0, double y0, std::span<const double> times,
                                          const StiffOptions& opt = {}, StiffStats* stats = nullptr)
{
    auto f = [mu](double, const Vec& v, Vec& dv) {
        dv[0] = v[1];
        dv[1] = mu * (1.0 - v[0] * v[0]) * v[1] - v[0];
    };
    auto jac = [mu](double, const Vec& v, Eigen::MatrixXd& J) {
        J(0, 0) = 0.0;
        J(0, 1) = 1.0;
        J(1, 0) = -2.0 * mu * v[0] * v[1] - 1.0;
        J(1, 1) = mu * (1.0 - v[0] * v[0]);
    };
    Vec y(2);
    y << x0, y0;
    return solve_trbdf2(f, jac, y, 0.0, times, opt, stats);
}

inline constexpr double kVdpEnd = 4000.0;
inline constexpr double kVdpTimeScale = 200.0;

/// Stiff Van der Pol on [0, 4000] with y(0) = 0; emits x only, at the given
/// raw times (callers rescale by 1/200 for the dataset).
inline Trajectory solve_stiff_vdp(double x0, std::span<const double> raw_times, double mu = 1000.0,
                                  const StiffOptions& opt = {})
{
    const auto ys = solve_van_der_pol(mu, x0, 0.0, raw_times, opt);
    Trajectory tr;
    tr.times.assign(raw_times.begin(), raw_times.end());
    for (const auto& v : ys)
        tr.states.push_back({v[0]});
    return tr;
}

// ---------------------------------------------------------------------------
// Closed forms and waveforms

inline double heaviside(double t)
{
    return t >= 0.0 ? 1.0 : 0.0;
}

/// x'' + 4x = u(t), u the ramp 0 / (t-5)/5 / 1 switching at 5 and 10, x(0) = x0, x'(0) = 0.
inline double eval_forced_ode(double x0, double t)
{
    auto ramp = [](double s) { return s - 0.5 * std::sin(2.0 * s); };
    return x0 * std::cos(2.0 * t) + 0.05 * (heaviside(t - 5.0) * ramp(t - 5.0) - heaviside(t - 10.0) * ramp(t - 10.0));
}

/// x' + 2x + 5 int_0^t x = u(t) (unit step), x(0) = x0.
inline double eval_integro_de(double x0, double t)
{
    using C = std::complex<double>;
    const C i(0.0, 1.0);
    const C a = 2.0 * x0 + (x0 - 1.0) * i;
    const C b = 2.0 * x0 - (x0 - 1.0) * i;
    return 0.25 * (std::exp(C(-1.0, -2.0) * t) * (a * std::exp(4.0 * i * t) + b)).real();
}

inline double eval_waveform(SystemKind kind, double t)
{
    const double two_pi = 2.0 * std::numbers::pi;
    switch (kind) {
    case SystemKind::Sine: return std::sin(t);
    case SystemKind::Square: {
        const auto k = static_cast<long long>(std::floor(t / std::numbers::pi));
        return 2.0 * (1.0 - static_cast<double>(((k % 2) + 2) % 2));
    }
    case SystemKind::Sawtooth: return t / two_pi - std::floor(t / two_pi);
    default: throw DomainError("eval_waveform: waveform kind required");
    }
}

inline Trajectory gen_waveform(SystemKind kind, double phase_shift, std::span<const double> times)
{
    Trajectory tr;
    tr.times.assign(times.begin(), times.end());
    for (double t : times)
        tr.states.push_back({eval_waveform(kind, t + phase_shift)});
    tr.init = {{"shift", phase_shift}};
    return tr;
}

// ---------------------------------------------------------------------------
// Datasets

struct Split
{
    std::vector<int> train, val, test;
};

struct Normalization
{
    std::vector<double> mean;
    std::vector<double> std;

    std::uint64_t hash() const
    {
        Fnv1a h;
        h.add(static_cast<std::uint64_t>(mean.size()));
        for (double v : mean)
            h.add(v);
        for (double v : std)
            h.add(v);
        return h.value();
    }

    json to_json() const { return {{"mean", mean}, {"std", std}}; }
    static Normalization from_json(const json& j)
    {
        return {j.at("mean").get<std::vector<double>>(), j.at("std").get<std::vector<double>>()};
    }
};

struct TrajectorySet
{
    SystemSpec spec;
    std::uint64_t seed = 0;
    double noise_sigma = 0.0;
    std::vector<Trajectory> trajectories;
    Split split;
    Normalization norm;
    json run_config = json::object();

    int dim() const { return trajectories.empty() ? state_dim(spec.kind) : static_cast<int>(trajectories[0].dim()); }

    const Trajectory& by_id(int id) const
    {
        for (const auto& t : trajectories)
            if (t.id == id)
                return t;
        throw ConfigError("trajectory id " + std::to_string(id) + " not in dataset");
    }
};

/// Time interval of each system's samples (in dataset time units).
inline std::pair<double, double> sample_interval(SystemKind k)
{
    switch (k) {
    case SystemKind::LotkaVolterraDDE: return {0.1, 2.0};
    case SystemKind::IntegroDE: return {0.0, 4.0};
    default: return {0.0, 20.0};
    }
}

/// Row-major product grid with side ceil(sqrt(n)); the first n nodes are used.
inline std::vector<std::array<double, 2>> grid_2d(double lo, double hi, std::size_t n)
{
    const auto side = static_cast<std::size_t>(std::ceil(std::sqrt(static_cast<double>(n))));
    const auto axis = linspace(lo, hi, side);
    std::vector<std::array<double, 2>> out;
    for (std::size_t i = 0; i < n; ++i)
        out.push_back({axis[i / side], axis[i % side]});
    return out;
}

inline Split make_split(std::size_t n, std::uint64_t seed)
{
    std::vector<int> idx(n);
    for (std::size_t i = 0; i < n; ++i)
        idx[i] = static_cast<int>(i);
    CounterRng rng(seed, 0x5B117);
    rng.shuffle(idx);
    const auto n_train = static_cast<std::size_t>(std::floor(0.8 * static_cast<double>(n)));
    const auto n_tv = static_cast<std::size_t>(std::floor(0.9 * static_cast<double>(n)));
    Split s;
    s.train.assign(idx.begin(), idx.begin() + n_train);
    s.val.assign(idx.begin() + n_train, idx.begin() + n_tv);
    s.test.assign(idx.begin() + n_tv, idx.end());
    std::sort(s.train.begin(), s.train.end());
    std::sort(s.val.begin(), s.val.end());
    std::sort(s.test.begin(), s.test.end());
    return s;
}

/// Per-dimension mean and sample standard deviation over the given trajectories.
inline Normalization compute_normalization(const std::vector<Trajectory>& trajs, std::span<const int> ids)
{
    if (ids.empty())
        throw DomainError("normalization needs a non-empty training split");
    const std::size_t D = trajs.at(static_cast<std::size_t>(ids[0])).dim();
    std::vector<double> sum(D, 0.0), sq(D, 0.0);
    std::size_t count = 0;
    for (int id : ids)
        for (const auto& x : trajs.at(static_cast<std::size_t>(id)).states) {
            for (std::size_t d = 0; d < D; ++d)
                sum[d] += x[d];
            ++count;
        }
    Normalization n{std::vector<double>(D), std::vector<double>(D)};
    for (std::size_t d = 0; d < D; ++d)
        n.mean[d] = sum[d] / static_cast<double>(count);
    for (int id : ids)
        for (const auto& x : trajs.at(static_cast<std::size_t>(id)).states)
            for (std::size_t d = 0; d < D; ++d)
                sq[d] += (x[d] - n.mean[d]) * (x[d] - n.mean[d]);
    for (std::size_t d = 0; d < D; ++d) {
        n.std[d] = count > 1 ? std::sqrt(sq[d] / static_cast<double>(count - 1)) : 0.0;
        if (!(n.std[d] > 0.0))
            n.std[d] = 1.0;
    }
    return n;
}

/// One noise-free trajectory of the system for initial-condition index i of n.
inline Trajectory generate_trajectory(const SystemSpec& spec, std::size_t i, std::size_t n, std::size_t n_points)
{
    const auto [lo, hi] = sample_interval(spec.kind);
    const auto times = linspace(lo, hi, n_points);
    Trajectory tr;
    switch (spec.kind) {
    case SystemKind::SpiralDDE:
    case SystemKind::LotkaVolterraDDE: {
        const auto g = spec.kind == SystemKind::SpiralDDE ? grid_2d(-2.0, 2.0, n)[i] : grid_2d(0.1, 2.0, n)[i];
        Vec hist(2);
        hist << g[0], g[1];
        tr = solve_dde(spec, hist, times);
        tr.init = {{"history", g}};
        break;
    }
    case SystemKind::MackeyGlassDDE: {
        const double c = linspace(0.0, kMackeyStart, n)[i];
        const auto p = mackey_glass_dde(spec, c);
        const auto sol = integrate_dde(p, kMackeyEnd);
        const auto raw = linspace(0.0, kMackeyEnd, n_points);
        tr.states = sample(sol, raw);
        tr.times = times;
        tr.init = {{"switch_time", c}, {"history_values", {kMackeyHistoryLow, kMackeyHistoryHigh}}};
        break;
    }
    case SystemKind::StiffVanDerPol: {
        const double x0 = linspace(0.1, 2.0, n)[i];
        const auto raw = linspace(0.0, kVdpEnd, n_points);
        tr = solve_stiff_vdp(x0, raw, spec.mu);
        tr.times = times;
        tr.init = {{"x0", x0}, {"y0", 0.0}};
        break;
    }
    case SystemKind::ForcedODE: {
        const double x0 = linspace(0.0, 0.1, n)[i];
        tr.times = times;
        for (double t : times)
            tr.states.push_back({eval_forced_ode(x0, t)});
        tr.init = {{"x0", x0}};
        break;
    }
    case SystemKind::IntegroDE: {
        const double x0 = linspace(0.0, 1.0, n)[i];
        tr.times = times;
        for (double t : times)
            tr.states.push_back({eval_integro_de(x0, t)});
        tr.init = {{"x0", x0}};
        break;
    }
    case SystemKind::Sine:
    case SystemKind::Square:
    case SystemKind::Sawtooth: {
        const double shift = 2.0 * std::numbers::pi * static_cast<double>(i) / static_cast<double>(n);
        tr = gen_waveform(spec.kind, shift, times);
        break;
    }
    }
    tr.id = static_cast<int>(i);
    return tr;
}

inline TrajectorySet generate_dataset(const SystemSpec& spec, std::size_t n_traj, std::size_t n_points,
                                      std::uint64_t seed, double noise_sigma,
                                      unsigned threads = default_threads())
{
    if (n_traj < 10)
        throw ConfigError("generate_dataset: need at least 10 trajectories for an 80:10:10 split");
    if (n_points < 2)
        throw ConfigError("generate_dataset: need at least 2 points per trajectory");
    if (!(noise_sigma >= 0.0))
        throw ConfigError("generate_dataset: noise sigma must be >= 0");

    TrajectorySet ds;
    ds.spec = spec;
    ds.seed = seed;
    ds.noise_sigma = noise_sigma;
    ds.trajectories.resize(n_traj);
    parallel_for(
        n_traj,
        [&](std::size_t i) {
            Trajectory tr;
            try {
                tr = generate_trajectory(spec, i, n_traj, n_points);
            } catch (const NumericalError& e) {
                throw NumericalError("trajectory " + std::to_string(i) + ": " + e.what());
            }
            if (noise_sigma > 0.0) {
                CounterRng rng(CounterRng::derive(seed, i));
                for (auto& x : tr.states)
                    for (auto& v : x)
                        v += noise_sigma * rng.normal();
            }
            for (const auto& x : tr.states)
                for (double v : x)
                    if (!std::isfinite(v))
                        throw NumericalError("trajectory " + std::to_string(i) + " contains non-finite values");
            ds.trajectories[i] = std::move(tr);
        },
        threads);
    ds.split = make_split(n_traj, seed);
    ds.norm = compute_normalization(ds.trajectories, ds.split.train);
    return ds;
}

// ---------------------------------------------------------------------------
// JSON-lines I/O

inline json dataset_header(const TrajectorySet& ds)
{
    return {{"format_version", kDatasetFormatVersion},
            {"system_spec", ds.spec.to_json()},
            {"seed", ds.seed},
            {"noise_sigma", ds.noise_sigma},
            {"n_trajectories", ds.trajectories.size()},
            {"split", {{"train", ds.split.train}, {"val", ds.split.val}, {"test", ds.split.test}}},
            {"norm", ds.norm.to_json()},
            {"norm_hash", ds.norm.hash()},
            {"rng", CounterRng::algorithm},
            {"run_config", ds.run_config}};
}

inline void write_dataset(const TrajectorySet& ds, std::ostream& out)
{
    out << dataset_header(ds).dump() << '\n';
    for (const auto& t : ds.trajectories) {
        json line{{"id", t.id},
                  {"system", system_name(ds.spec.kind)},
                  {"init", t.init},
                  {"times", t.times},
                  {"states", t.states}};
        out << line.dump() << '\n';
    }
}

inline void write_dataset(const TrajectorySet& ds, const std::filesystem::path& path)
{
    std::ofstream out(path, std::ios::binary);
    if (!out)
        throw ConfigError("cannot write dataset to '" + path.string() + "'");
    write_dataset(ds, out);
    if (!out)
        throw ConfigError("write failed for '" + path.string() + "'");
}

inline TrajectorySet read_dataset(std::istream& in, const std::string& what = "dataset")
{
    std::string line;
    if (!std::getline(in, line))
        throw ConfigError(what + ": empty file");
    TrajectorySet ds;
    try {
        const auto h = json::parse(line);
        if (h.at("format_version").get<int>() != kDatasetFormatVersion)
            throw IncompatibleError(what + ": unsupported format_version " + h.at("format_version").dump());
        ds.spec = SystemSpec::from_json(h.at("system_spec"));
        ds.seed = h.at("seed").get<std::uint64_t>();
        ds.noise_sigma = h.at("noise_sigma").get<double>();
        ds.split.train = h.at("split").at("train").get<std::vector<int>>();
        ds.split.val = h.at("split").at("val").get<std::vector<int>>();
        ds.split.test = h.at("split").at("test").get<std::vector<int>>();
        ds.norm = Normalization::from_json(h.at("norm"));
        ds.run_config = h.value("run_config", json::object());
        while (std::getline(in, line)) {
            if (line.empty())
                continue;
            const auto j = json::parse(line);
            Trajectory t;
            t.id = j.at("id").get<int>();
            t.times = j.at("times").get<std::vector<double>>();
            t.states = j.at("states").get<std::vector<std::vector<double>>>();
            t.init = j.value("init", json());
            if (t.times.size() != t.states.size())
                throw ConfigError(what + ": trajectory " + std::to_string(t.id) + " has mismatched lengths");
            if (t.id != static_cast<int>(ds.trajectories.size()))
                throw ConfigError(what + ": trajectory ids must be 0..n-1 in order");
            ds.trajectories.push_back(std::move(t));
        }
    } catch (const json::exception& e) {
        throw ConfigError(what + ": malformed JSON (" + e.what() + ")");
    }
    for (auto* part : {&ds.split.train, &ds.split.val, &ds.split.test})
        for (int id : *part)
            if (id < 0 || id >= static_cast<int>(ds.trajectories.size()))
                throw ConfigError(what + ": split references unknown trajectory " + std::to_string(id));
    return ds;
}

inline TrajectorySet read_dataset(const std::filesystem::path& path)
{
    std::ifstream in(path, std::ios::binary);
    if (!in)
        throw ConfigError("cannot open dataset '" + path.string() + "'");
    return read_dataset(in, path.string());
}

} // namespace nlaplace::dynamics
