#pragma once

// Metrics and experiment protocols.

#include <algorithm>
#include <charconv>
#include <chrono>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <numbers>
#include <numeric>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "complex_geometry.hpp"
#include "dynamics.hpp"
#include "error.hpp"
#include "ilt.hpp"
#include "model.hpp"

namespace nlaplace::eval {

using json = nlohmann::json;
using States = std::vector<std::vector<double>>;

/// Shortest decimal text that parses back to the same double.
inline std::string format_double(double v)
{
    char buf[32];
    const auto r = std::to_chars(buf, buf + sizeof buf, v);
    return std::string(buf, r.ptr);
}

/// sqrt of the mean squared error over all times and dimensions.
inline double rmse(const States& pred, const States& truth)
{
    if (pred.size() != truth.size())
        throw DomainError("rmse: prediction and truth lengths differ");
    double sq = 0.0;
    std::size_t n = 0;
    for (std::size_t i = 0; i < pred.size(); ++i) {
        if (pred[i].size() != truth[i].size())
            throw DomainError("rmse: state dimensions differ at index " + std::to_string(i));
        for (std::size_t d = 0; d < pred[i].size(); ++d) {
            const double e = pred[i][d] - truth[i][d];
            sq += e * e;
            ++n;
        }
    }
    if (n == 0)
        throw DomainError("rmse: empty input");
    return std::sqrt(sq / static_cast<double>(n));
}

inline double mean_of(std::span<const double> v)
{
    return v.empty() ? 0.0 : std::accumulate(v.begin(), v.end(), 0.0) / static_cast<double>(v.size());
}

/// Sample standard deviation (0 for fewer than two values).
inline double std_of(std::span<const double> v)
{
    if (v.size() < 2)
        return 0.0;
    const double m = mean_of(v);
    double s = 0.0;
    for (double x : v)
        s += (x - m) * (x - m);
    return std::sqrt(s / static_cast<double>(v.size() - 1));
}

inline double median_of(std::vector<double> v)
{
    if (v.empty())
        throw DomainError("median of an empty list");
    std::sort(v.begin(), v.end());
    const std::size_t n = v.size();
    return n % 2 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

// ---------------------------------------------------------------------------
// Extrapolation

struct TrajectoryScore
{
    int id = 0;
    double rmse = 0.0;            // de-normalized
    double rmse_normalized = 0.0; // in training-normalized units
};

struct EvalReport
{
    std::vector<TrajectoryScore> per_trajectory; // sorted by id
    double mean_rmse = 0.0;
    double std_rmse = 0.0;
    double mean_rmse_normalized = 0.0;
    long nfe = 0;
    json config = json::object();

    void finalize()
    {
        std::sort(per_trajectory.begin(), per_trajectory.end(),
                  [](const auto& a, const auto& b) { return a.id < b.id; });
        std::vector<double> r, rn;
        for (const auto& s : per_trajectory) {
            r.push_back(s.rmse);
            rn.push_back(s.rmse_normalized);
        }
        mean_rmse = mean_of(r);
        std_rmse = std_of(r);
        mean_rmse_normalized = mean_of(rn);
    }

    json to_json() const
    {
        json per = json::array();
        for (const auto& s : per_trajectory)
            per.push_back({{"id", s.id}, {"rmse", s.rmse}, {"rmse_normalized", s.rmse_normalized}});
        return {{"mean_rmse", mean_rmse},
                {"std_rmse", std_rmse},
                {"mean_rmse_normalized", mean_rmse_normalized},
                {"n_trajectories", per_trajectory.size()},
                {"nfe", nfe},
                {"rmse_space", "de-normalized (original units); normalized-space RMSE also reported"},
                {"per_trajectory", per},
                {"config", config}};
    }

    std::string to_csv() const
    {
        std::string out = "id,rmse,rmse_normalized\n";
        for (const auto& s : per_trajectory)
            out += std::to_string(s.id) + "," + format_double(s.rmse) + "," + format_double(s.rmse_normalized) + "\n";
        return out;
    }
};

/// Encode the first half of each test trajectory, predict the second half.
inline EvalReport extrapolation_eval(model::Predictor& predictor, const dynamics::TrajectorySet& ds,
                                     std::span<const int> ids)
{
    EvalReport rep;
    for (int id : ids) {
        const auto& tr = ds.by_id(id);
        const std::size_t n_obs = model::observed_count(tr.times.size());
        const auto times = std::span(tr.times).subspan(n_obs);
        const States truth(tr.states.begin() + static_cast<std::ptrdiff_t>(n_obs), tr.states.end());
        const States pred = predictor.predict(tr, n_obs, times);
        States pn = pred, tn = truth;
        for (std::size_t i = 0; i < pn.size(); ++i)
            for (std::size_t d = 0; d < pn[i].size(); ++d) {
                pn[i][d] = (pn[i][d] - ds.norm.mean[d]) / ds.norm.std[d];
                tn[i][d] = (tn[i][d] - ds.norm.mean[d]) / ds.norm.std[d];
            }
        rep.per_trajectory.push_back({id, rmse(pred, truth), rmse(pn, tn)});
    }
    rep.finalize();
    return rep;
}

inline EvalReport extrapolation_eval(model::Predictor& predictor, const dynamics::TrajectorySet& ds)
{
    return extrapolation_eval(predictor, ds, ds.split.test);
}

/// Checks that a model can be evaluated on a dataset.
inline void check_compatible(const model::NeuralLaplace& m, const dynamics::TrajectorySet& ds)
{
    if (ds.dim() != m.config().rep.state_dim)
        throw IncompatibleError("dataset state dimension " + std::to_string(ds.dim()) +
                                " does not match checkpoint state dimension " +
                                std::to_string(m.config().rep.state_dim));
    if (ds.norm.hash() != m.normalization().hash())
        throw IncompatibleError("dataset normalization statistics (hash " + std::to_string(ds.norm.hash()) +
                                ") differ from the checkpoint's (hash " +
                                std::to_string(m.normalization().hash()) + ")");
}

// ---------------------------------------------------------------------------
// Stub predictors

/// Returns the true continuation (looked up by time in the trajectory itself).
class TruthPredictor : public model::Predictor
{
public:
    States predict(const dynamics::Trajectory& tr, std::size_t, std::span<const double> times) override
    {
        States out;
        for (double t : times) {
            auto it = std::find(tr.times.begin(), tr.times.end(), t);
            if (it == tr.times.end())
                throw DomainError("truth predictor: time not in trajectory");
            out.push_back(tr.states[static_cast<std::size_t>(it - tr.times.begin())]);
        }
        return out;
    }
};

/// Predicts zero in normalized units, i.e. the training mean.
class MeanPredictor : public model::Predictor
{
public:
    explicit MeanPredictor(dynamics::Normalization norm)
        : norm_(std::move(norm))
    {
    }
    States predict(const dynamics::Trajectory&, std::size_t, std::span<const double> times) override
    {
        return States(times.size(), norm_.mean);
    }

private:
    dynamics::Normalization norm_;
};

// ---------------------------------------------------------------------------
// ILT benchmark

struct BenchRow
{
    IltAlgorithm algorithm = IltAlgorithm::Fsi;
    int degree = 0;
    std::size_t terms = 0;
    double rmse = 0.0;
    double seconds_per_point = 0.0;
    std::string error; // non-empty if the algorithm could not run
};

struct BenchSpec
{
    double t_lo = 0.0;
    double t_hi = 10.0;
    std::size_t points = 1000;
    int degree = 16;
    std::optional<std::string> cme_coefficients;
};

/// Reconstruction grid: `points` equally spaced times ending at t_hi, excluding t_lo.
inline std::vector<double> bench_times(const BenchSpec& spec)
{
    std::vector<double> t(spec.points);
    for (std::size_t k = 0; k < spec.points; ++k)
        t[k] = spec.t_lo + (spec.t_hi - spec.t_lo) * static_cast<double>(k + 1) / static_cast<double>(spec.points);
    return t;
}

/// F(s) = s / (s^2 + 1) against cos(t).
inline std::vector<BenchRow> ilt_benchmark(std::span<const IltAlgorithm> algorithms, const BenchSpec& spec)
{
    const auto times = bench_times(spec);
    const LaplaceFn F = [](Complex s) { return s / (s * s + 1.0); };
    std::vector<BenchRow> rows;
    for (auto a : algorithms) {
        BenchRow row;
        row.algorithm = a;
        row.degree = spec.degree;
        IltConfig cfg{a, spec.degree, std::nullopt};
        if (a == IltAlgorithm::Cme)
            cfg.cme_coeff_source = spec.cme_coefficients ? *spec.cme_coefficients : default_cme_table_path().string();
        const InverseLaplace ilt(cfg); // configuration errors propagate
        row.terms = ilt.terms();
        const auto start = std::chrono::steady_clock::now();
        double sq = 0.0;
        for (double t : times) {
            const double e = ilt.invert(F, t) - std::cos(t);
            sq += e * e;
        }
        row.seconds_per_point =
            std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count() /
            static_cast<double>(times.size());
        row.rmse = std::sqrt(sq / static_cast<double>(times.size()));
        rows.push_back(row);
    }
    return rows;
}

inline std::string bench_csv(const std::vector<BenchRow>& rows)
{
    std::string out = "algorithm,N,terms,rmse,seconds_per_point\n";
    for (const auto& r : rows)
        out += std::string(to_string(r.algorithm)) + "," + std::to_string(r.degree) + "," + std::to_string(r.terms) +
               "," + format_double(r.rmse) + "," + format_double(r.seconds_per_point) + "\n";
    return out;
}

// ---------------------------------------------------------------------------
// NFE counting

enum class NfeMode { SingleFuturePoint, PointsInFixedInterval };

struct NfeCount
{
    double parameter = 0.0; // delta t_H or n
    long count = 0;
};

/// Representation-network evaluations for a sweep.
///   SingleFuturePoint: one query at t_last + value, for each value (delta t_H).
///   PointsInFixedInterval: `value` equally spaced queries in (t_last, t_last + 1].
inline std::vector<NfeCount> count_nfe(model::NeuralLaplace& m, const dynamics::Trajectory& window, NfeMode mode,
                                       std::span<const double> sweep)
{
    std::vector<NfeCount> out;
    const double t_last = window.times.back();
    for (double v : sweep) {
        std::vector<double> q;
        if (mode == NfeMode::SingleFuturePoint) {
            q.push_back(t_last + v);
        } else {
            const auto n = static_cast<std::size_t>(v);
            for (std::size_t i = 1; i <= n; ++i)
                q.push_back(t_last + static_cast<double>(i) / static_cast<double>(n));
        }
        const long before = m.nfe();
        (void)m.predict(window, window.times.size(), q);
        out.push_back({v, m.nfe() - before});
    }
    return out;
}

// ---------------------------------------------------------------------------
// Plot export

/// Columns t, truth_0..truth_{D-1}, pred_0..pred_{D-1} at every sample time.
/// Over the observed window the pred columns repeat the observations.
inline std::string export_plot_csv(model::Predictor& predictor, const dynamics::Trajectory& tr)
{
    const std::size_t n_obs = model::observed_count(tr.times.size());
    const States pred = predictor.predict(tr, n_obs, std::span(tr.times).subspan(n_obs));
    const std::size_t D = tr.dim();
    std::string out = "t";
    for (std::size_t d = 0; d < D; ++d)
        out += ",truth_" + std::to_string(d);
    for (std::size_t d = 0; d < D; ++d)
        out += ",pred_" + std::to_string(d);
    out += "\n";
    for (std::size_t i = 0; i < tr.times.size(); ++i) {
        out += format_double(tr.times[i]);
        for (std::size_t d = 0; d < D; ++d)
            out += "," + format_double(tr.states[i][d]);
        const auto& p = i < n_obs ? tr.states[i] : pred[i - n_obs];
        for (std::size_t d = 0; d < D; ++d)
            out += "," + format_double(p[d]);
        out += "\n";
    }
    return out;
}

// ---------------------------------------------------------------------------
// Frequency-filter toy: sin t + sin 2t corrupted by 0.5 sin 11t.

struct FilterToyConfig
{
    std::size_t n_traj = 100;
    std::size_t n_points = 200;
    double t_end = 20.0;
    double max_modulus = 3.0; // |F(s)| bound through phi_cap
    model::TrainConfig train;
};

struct FilterToyResult
{
    double rmse_to_clean = 0.0;
    double rmse_to_corrupted = 0.0;
    int epochs_run = 0;
};

inline double filter_toy_clean(double t)
{
    return std::sin(t) + std::sin(2.0 * t);
}

inline double filter_toy_corrupted(double t)
{
    return filter_toy_clean(t) + 0.5 * std::sin(11.0 * t);
}

/// Phase-shifted copies of the corrupted (or clean) signal with a shared split.
inline dynamics::TrajectorySet filter_toy_dataset(const FilterToyConfig& cfg, bool corrupted)
{
    dynamics::TrajectorySet ds;
    ds.spec = dynamics::SystemSpec::defaults(dynamics::SystemKind::Sine);
    ds.seed = cfg.train.seed;
    const auto times = linspace(0.0, cfg.t_end, cfg.n_points);
    for (std::size_t i = 0; i < cfg.n_traj; ++i) {
        dynamics::Trajectory tr;
        tr.id = static_cast<int>(i);
        const double shift = 2.0 * std::numbers::pi * static_cast<double>(i) / static_cast<double>(cfg.n_traj);
        tr.times = times;
        for (double t : times)
            tr.states.push_back({corrupted ? filter_toy_corrupted(t + shift) : filter_toy_clean(t + shift)});
        tr.init = {{"shift", shift}};
        ds.trajectories.push_back(std::move(tr));
    }
    ds.split = dynamics::make_split(cfg.n_traj, cfg.train.seed);
    ds.norm = dynamics::compute_normalization(ds.trajectories, ds.split.train);
    ds.run_config = {{"toy", "sin(t) + sin(2t) + 0.5 sin(11t)"}, {"corrupted", corrupted}};
    return ds;
}

/// Trains on the corrupted signal with |F| capped; scores test predictions
/// against the clean and the corrupted continuations.
inline FilterToyResult frequency_filter_toy(const FilterToyConfig& cfg)
{
    const auto noisy = filter_toy_dataset(cfg, true);
    auto clean = filter_toy_dataset(cfg, false);
    clean.norm = noisy.norm;
    auto tc = cfg.train;
    tc.phi_max = phi_cap(cfg.max_modulus);
    model::NeuralLaplace m(tc.model_config(1), tc.seed);
    const auto res = model::train(m, noisy, tc);
    FilterToyResult out;
    out.epochs_run = static_cast<int>(res.history.size());
    out.rmse_to_corrupted = model::split_rmse(m, noisy, noisy.split.test);
    out.rmse_to_clean = model::split_rmse(m, clean, clean.split.test);
    return out;
}

} // namespace nlaplace::eval
