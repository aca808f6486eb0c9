#pragma once

// Numerical inverse Laplace transforms.
//
// Every algorithm is split into a query step (which complex points s the
// transform F must be sampled at to reconstruct x(t)) and a compute step
// (reduce the samples to x(t)). The query count per time point, b, is a
// property of the algorithm only, never of t.
//
// All algorithms except de Hoog are linear in the samples and can be
// written as x(t) = sum_k Re(w_k F(s_k)); LinearQuery exposes the weights
// so that callers can differentiate through the reduction.

#include <algorithm>
#include <cmath>
#include <complex>
#include <cstddef>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <map>
#include <mutex>
#include <numbers>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include <json.hpp>

#include "complex_geometry.hpp"
#include "error.hpp"

namespace nlaplace {

enum class IltAlgorithm { Fsi, Stehfest, FixedTalbot, DeHoog, Cme };

inline std::string_view to_string(IltAlgorithm a)
{
    switch (a) {
    case IltAlgorithm::Fsi: return "fsi";
    case IltAlgorithm::Stehfest: return "stehfest";
    case IltAlgorithm::FixedTalbot: return "talbot";
    case IltAlgorithm::DeHoog: return "dehoog";
    case IltAlgorithm::Cme: return "cme";
    }
    return "unknown";
}

inline IltAlgorithm parse_ilt_algorithm(std::string_view name)
{
    for (auto a : {IltAlgorithm::Fsi, IltAlgorithm::Stehfest, IltAlgorithm::FixedTalbot,
                   IltAlgorithm::DeHoog, IltAlgorithm::Cme})
        if (to_string(a) == name)
            return a;
    throw ConfigError("unknown ILT algorithm '" + std::string(name) +
                      "' (expected fsi, stehfest, talbot, dehoog or cme)");
}

struct QuerySet
{
    double time = 0.0;
    std::vector<Complex> points;
};

/// Query points plus the complex weights of a linear reduction.
struct LinearQuery
{
    double time = 0.0;
    std::vector<Complex> points;
    std::vector<Complex> weights;

    double reduce(std::span<const Complex> samples) const
    {
        if (samples.size() != points.size())
            throw DomainError("ILT: expected " + std::to_string(points.size()) + " samples, got " +
                              std::to_string(samples.size()));
        double acc = 0.0;
        for (std::size_t k = 0; k < samples.size(); ++k)
            acc += weights[k].real() * samples[k].real() - weights[k].imag() * samples[k].imag();
        return acc;
    }
};

using LaplaceFn = std::function<Complex(Complex)>;
using BatchLaplaceFn = std::function<std::vector<Complex>(std::span<const Complex>)>;

namespace detail {

inline void require_positive_time(double t, std::string_view who)
{
    if (!(t > 0.0) || !std::isfinite(t))
        throw DomainError(std::string(who) + ": time must be positive and finite, got " +
                          std::to_string(t));
}

inline std::vector<Complex> sample(const LaplaceFn& F, std::span<const Complex> points)
{
    std::vector<Complex> out;
    out.reserve(points.size());
    for (auto s : points)
        out.push_back(F(s));
    return out;
}

inline void require_finite(std::span<const Complex> samples, std::string_view who)
{
    for (auto v : samples)
        if (!std::isfinite(v.real()) || !std::isfinite(v.imag()))
            throw NumericalError(std::string(who) + ": transform is not finite at a query point");
}

} // namespace detail

// ---------------------------------------------------------------------------
// Fourier series inversion (trapezoidal rule on the Bromwich line).

inline constexpr double kFsiAlpha = 1e-3;
inline constexpr double kFsiEpsilon = 10.0 * kFsiAlpha;
inline constexpr double kFsiScale = 2.0; // T = 2t

/// Real part of the Bromwich line used for time t.
inline double fsi_sigma(double t)
{
    return kFsiAlpha - std::log(kFsiEpsilon) / (kFsiScale * t);
}

inline QuerySet fsi_query(double t, int N)
{
    detail::require_positive_time(t, "fsi_query");
    if (N < 1)
        throw DomainError("fsi_query: N must be >= 1");
    const double T = kFsiScale * t;
    const double sigma = fsi_sigma(t);
    QuerySet q{t, {}};
    q.points.reserve(2 * N + 1);
    for (int k = 0; k <= 2 * N; ++k)
        q.points.emplace_back(sigma, k * std::numbers::pi / T);
    return q;
}

inline LinearQuery fsi_linear_query(double t, int N)
{
    auto q = fsi_query(t, N);
    const double T = kFsiScale * t;
    const double scale = std::exp(fsi_sigma(t) * t) / T;
    LinearQuery lq{t, std::move(q.points), {}};
    lq.weights.reserve(lq.points.size());
    for (int k = 0; k <= 2 * N; ++k) {
        const Complex w = scale * std::polar(1.0, k * std::numbers::pi * t / T);
        lq.weights.push_back(k == 0 ? 0.5 * w : w);
    }
    return lq;
}

/// x(t) from samples of F at fsi_query(t, N), in order.
inline double fsi_reconstruct(double t, std::span<const Complex> samples, int N)
{
    if (samples.size() != static_cast<std::size_t>(2 * N + 1))
        throw DomainError("fsi_reconstruct: expected 2N+1 = " + std::to_string(2 * N + 1) +
                          " samples, got " + std::to_string(samples.size()));
    return fsi_linear_query(t, N).reduce(samples);
}

/// d x(t) / d Re F(s_k) and d x(t) / d Im F(s_k).
struct SampleGradient
{
    std::vector<double> d_re;
    std::vector<double> d_im;
};

inline SampleGradient fsi_reconstruct_gradient(double t, int N)
{
    const auto lq = fsi_linear_query(t, N);
    SampleGradient g;
    for (auto w : lq.weights) {
        g.d_re.push_back(w.real());
        g.d_im.push_back(-w.imag());
    }
    return g;
}

// ---------------------------------------------------------------------------
// Stehfest (discrete Post-Widder), real-axis queries only.

inline constexpr int kStehfestDefaultN = 14;

/// Stehfest weights V_1..V_N, memoized per N.
inline const std::vector<double>& stehfest_weights(int N)
{
    if (N < 2 || N % 2 != 0)
        throw DomainError("stehfest: N must be even and >= 2");
    static std::mutex mutex;
    static std::map<int, std::vector<double>> cache;
    std::scoped_lock lock(mutex);
    if (auto it = cache.find(N); it != cache.end())
        return it->second;

    if (N > 18)
        std::clog << "warning: Stehfest with N = " << N
                  << " loses most significant digits in double precision\n";

    auto fact = [](int n) {
        long double f = 1;
        for (int i = 2; i <= n; ++i)
            f *= i;
        return f;
    };
    const int half = N / 2;
    std::vector<double> V(N);
    for (int k = 1; k <= N; ++k) {
        long double acc = 0;
        for (int j = (k + 1) / 2; j <= std::min(k, half); ++j)
            acc += std::pow(static_cast<long double>(j), half) * fact(2 * j) /
                   (fact(half - j) * fact(j) * fact(j - 1) * fact(k - j) * fact(2 * j - k));
        V[k - 1] = static_cast<double>(((k + half) % 2 == 0 ? 1 : -1) * acc);
    }
    return cache.emplace(N, std::move(V)).first->second;
}

inline LinearQuery stehfest_linear_query(double t, int N)
{
    detail::require_positive_time(t, "stehfest");
    const auto& V = stehfest_weights(N);
    const double a = std::numbers::ln2 / t;
    LinearQuery lq{t, {}, {}};
    for (int k = 1; k <= N; ++k) {
        lq.points.emplace_back(k * a, 0.0);
        lq.weights.emplace_back(V[k - 1] * a, 0.0);
    }
    return lq;
}

inline double stehfest_invert(const LaplaceFn& F, double t, int N = kStehfestDefaultN)
{
    const auto lq = stehfest_linear_query(t, N);
    const auto samples = detail::sample(F, lq.points);
    detail::require_finite(samples, "stehfest");
    return lq.reduce(samples);
}

// ---------------------------------------------------------------------------
// Fixed Talbot (Abate-Valko): contour s(theta) = r theta (cot theta + i).

inline LinearQuery talbot_linear_query(double t, int N)
{
    detail::require_positive_time(t, "talbot");
    if (N < 2)
        throw DomainError("talbot: N must be >= 2");
    const double r = 2.0 * N / (5.0 * t);
    LinearQuery lq{t, {}, {}};
    lq.points.emplace_back(r, 0.0);
    lq.weights.emplace_back(0.5 * std::exp(r * t) * r / N, 0.0);
    for (int k = 1; k < N; ++k) {
        const double theta = k * std::numbers::pi / N;
        const double cot = 1.0 / std::tan(theta);
        const Complex s(r * theta * cot, r * theta);
        const double slope = theta + (theta * cot - 1.0) * cot;
        lq.points.push_back(s);
        lq.weights.push_back(std::exp(t * s) * Complex(1.0, slope) * (r / N));
    }
    return lq;
}

inline double talbot_invert(const LaplaceFn& F, double t, int N)
{
    const auto lq = talbot_linear_query(t, N);
    const auto samples = detail::sample(F, lq.points);
    detail::require_finite(samples, "talbot");
    const double x = lq.reduce(samples);
    if (!std::isfinite(x))
        throw NumericalError("talbot: overflow on the contour");
    return x;
}

// ---------------------------------------------------------------------------
// de Hoog: Fourier series accelerated by a continued fraction (quotient-
// difference algorithm) with the remainder estimate. Not linear in F.

inline constexpr double kDeHoogTolerance = 1e-16;

inline double dehoog_gamma(double t)
{
    return -0.5 * std::log(kDeHoogTolerance) / (kFsiScale * t);
}

inline QuerySet dehoog_query(double t, int N)
{
    detail::require_positive_time(t, "dehoog");
    if (N < 1)
        throw DomainError("dehoog: N must be >= 1");
    const double T = kFsiScale * t;
    const double gamma = dehoog_gamma(t);
    QuerySet q{t, {}};
    for (int k = 0; k <= 2 * N; ++k)
        q.points.emplace_back(gamma, k * std::numbers::pi / T);
    return q;
}

inline double dehoog_compute(double t, std::span<const Complex> samples, int N)
{
    const int M = N;
    const int n = 2 * M + 1;
    if (samples.size() != static_cast<std::size_t>(n))
        throw DomainError("dehoog: expected 2N+1 samples");
    detail::require_finite(samples, "dehoog");

    auto divide = [](Complex num, Complex den) {
        if (std::abs(den) < 1e-300)
            throw NumericalError("dehoog: near-zero divisor in the quotient-difference table");
        return num / den;
    };

    std::vector<Complex> a(samples.begin(), samples.end());
    a[0] *= 0.5;

    // e[i][r], q[i][r] of the QD scheme, r = 0..M.
    std::vector<std::vector<Complex>> e(n, std::vector<Complex>(M + 1));
    std::vector<std::vector<Complex>> q(n, std::vector<Complex>(M + 1));
    for (int i = 0; i < n - 1; ++i)
        q[i][1] = divide(a[i + 1], a[i]);
    for (int r = 1; r <= M; ++r) {
        const int m = 2 * (M - r) + 1;
        for (int i = 0; i < m; ++i)
            e[i][r] = q[i + 1][r] - q[i][r] + e[i + 1][r - 1];
        if (r < M) {
            const int m2 = 2 * (M - r - 1) + 2;
            for (int i = 0; i < m2; ++i)
                q[i][r + 1] = divide(q[i + 1][r] * e[i + 1][r], e[i][r]);
        }
    }

    std::vector<Complex> d(n);
    d[0] = a[0];
    for (int m = 1; m <= M; ++m) {
        d[2 * m - 1] = -q[0][m];
        d[2 * m] = -e[0][m];
    }

    const double T = kFsiScale * t;
    const Complex z = std::polar(1.0, std::numbers::pi * t / T);
    std::vector<Complex> A(n + 1), B(n + 1);
    A[0] = 0.0;
    B[0] = 1.0;
    A[1] = d[0];
    B[1] = 1.0;
    for (int k = 2; k <= n; ++k) {
        A[k] = A[k - 1] + d[k - 1] * z * A[k - 2];
        B[k] = B[k - 1] + d[k - 1] * z * B[k - 2];
    }
    // Remainder estimate for the tail of the continued fraction.
    const Complex h = 0.5 * (1.0 + z * (d[n - 2] - d[n - 1]));
    const Complex R = -h * (1.0 - std::sqrt(1.0 + divide(z * d[n - 1], h * h)));
    const Complex An = A[n - 1] + R * A[n - 2];
    const Complex Bn = B[n - 1] + R * B[n - 2];
    const double x = std::exp(dehoog_gamma(t) * t) / T * divide(An, Bn).real();
    if (!std::isfinite(x))
        throw NumericalError("dehoog: non-finite result");
    return x;
}

inline double dehoog_invert(const LaplaceFn& F, double t, int N)
{
    const auto q = dehoog_query(t, N);
    return dehoog_compute(t, detail::sample(F, q.points), N);
}

// ---------------------------------------------------------------------------
// Concentrated matrix exponential (CME) with a precomputed coefficient table.

struct CmeCoefficients
{
    int order = 0;
    std::vector<Complex> eta;
    std::vector<Complex> beta;
    std::string source;

    static CmeCoefficients from_json(const nlohmann::json& j)
    {
        auto read = [&](const char* key) {
            std::vector<Complex> out;
            if (!j.contains(key) || !j.at(key).is_array())
                throw ConfigError(std::string("CME table: missing array '") + key + "'");
            for (const auto& pair : j.at(key)) {
                if (!pair.is_array() || pair.size() != 2)
                    throw ConfigError(std::string("CME table: '") + key + "' entries must be [re, im]");
                out.emplace_back(pair[0].get<double>(), pair[1].get<double>());
            }
            return out;
        };
        CmeCoefficients c;
        if (!j.contains("order"))
            throw ConfigError("CME table: missing 'order'");
        c.order = j.at("order").get<int>();
        c.eta = read("eta");
        c.beta = read("beta");
        c.source = j.value("source", "");
        if (c.eta.size() != c.beta.size())
            throw ConfigError("CME table: eta and beta lengths differ");
        if (c.eta.size() != static_cast<std::size_t>(c.order) + 1)
            throw ConfigError("CME table: order " + std::to_string(c.order) + " needs " +
                              std::to_string(c.order + 1) + " coefficients, found " +
                              std::to_string(c.eta.size()));
        return c;
    }

    static CmeCoefficients load(const std::filesystem::path& path)
    {
        std::ifstream in(path);
        if (!in)
            throw ConfigError("CME coefficient table not found at '" + path.string() +
                              "' (pass --cme-coefficients <file>)");
        try {
            return from_json(nlohmann::json::parse(in));
        } catch (const nlohmann::json::exception& ex) {
            throw ConfigError("CME table '" + path.string() + "': " + ex.what());
        }
    }

    std::size_t terms() const { return eta.size(); }
};

inline constexpr std::string_view kCmeConvention = "x(t) = (1/t) * sum_k Re(eta_k * F(beta_k / t))";

inline LinearQuery cme_linear_query(double t, const CmeCoefficients& c)
{
    detail::require_positive_time(t, "cme");
    if (c.eta.empty() || c.eta.size() != c.beta.size())
        throw ConfigError("cme: coefficient table not loaded");
    LinearQuery lq{t, {}, {}};
    for (std::size_t k = 0; k < c.eta.size(); ++k) {
        lq.points.push_back(c.beta[k] / t);
        lq.weights.push_back(c.eta[k] / t);
    }
    return lq;
}

inline double cme_invert(const LaplaceFn& F, double t, const CmeCoefficients& c)
{
    const auto lq = cme_linear_query(t, c);
    const auto samples = detail::sample(F, lq.points);
    detail::require_finite(samples, "cme");
    return lq.reduce(samples);
}

// ---------------------------------------------------------------------------

struct IltConfig
{
    IltAlgorithm algorithm = IltAlgorithm::Fsi;
    int degree = 16;
    std::optional<std::string> cme_coeff_source;
};

/// Default location of the shipped CME table, overridable at configure time.
inline std::filesystem::path default_cme_table_path()
{
#ifdef NLAPLACE_DATA_DIR
    return std::filesystem::path(NLAPLACE_DATA_DIR) / "cme_coefficients.json";
#else
    return "data/cme_coefficients.json";
#endif
}

/// One configured inversion algorithm with the query/compute split.
class InverseLaplace
{
public:
    explicit InverseLaplace(IltConfig config)
        : config_(std::move(config))
    {
        if (config_.degree < 1)
            throw ConfigError("ILT degree N must be >= 1");
        if (config_.algorithm == IltAlgorithm::Stehfest && config_.degree % 2 != 0)
            throw ConfigError("Stehfest requires an even N");
        if (config_.algorithm == IltAlgorithm::FixedTalbot && config_.degree < 2)
            throw ConfigError("fixed Talbot requires N >= 2");
        if (config_.algorithm == IltAlgorithm::Cme) {
            if (!config_.cme_coeff_source)
                throw ConfigError("CME requires a coefficient table (cme_coeff_source)");
            cme_ = CmeCoefficients::load(*config_.cme_coeff_source);
        }
    }

    const IltConfig& config() const { return config_; }

    /// Queries per reconstructed time point (b).
    std::size_t terms() const
    {
        switch (config_.algorithm) {
        case IltAlgorithm::Fsi:
        case IltAlgorithm::DeHoog: return static_cast<std::size_t>(2 * config_.degree + 1);
        case IltAlgorithm::Stehfest:
        case IltAlgorithm::FixedTalbot: return static_cast<std::size_t>(config_.degree);
        case IltAlgorithm::Cme: return cme_->terms();
        }
        return 0;
    }

    bool is_linear() const { return config_.algorithm != IltAlgorithm::DeHoog; }

    LinearQuery linear_query(double t) const
    {
        switch (config_.algorithm) {
        case IltAlgorithm::Fsi: return fsi_linear_query(t, config_.degree);
        case IltAlgorithm::Stehfest: return stehfest_linear_query(t, config_.degree);
        case IltAlgorithm::FixedTalbot: return talbot_linear_query(t, config_.degree);
        case IltAlgorithm::Cme: return cme_linear_query(t, *cme_);
        case IltAlgorithm::DeHoog: break;
        }
        throw ConfigError("de Hoog inversion is not linear in F and has no weight form");
    }

    std::vector<Complex> query(double t) const
    {
        if (config_.algorithm == IltAlgorithm::DeHoog)
            return dehoog_query(t, config_.degree).points;
        return linear_query(t).points;
    }

    double compute(double t, std::span<const Complex> samples) const
    {
        if (config_.algorithm == IltAlgorithm::DeHoog)
            return dehoog_compute(t, samples, config_.degree);
        detail::require_finite(samples, to_string(config_.algorithm));
        const double x = linear_query(t).reduce(samples);
        if (!std::isfinite(x))
            throw NumericalError(std::string(to_string(config_.algorithm)) + ": non-finite result");
        return x;
    }

    double invert(const LaplaceFn& F, double t) const
    {
        const auto points = query(t);
        return compute(t, detail::sample(F, points));
    }

    /// Inverts at every time with one batched call of F on all b * |times| points.
    std::vector<double> invert_batch(const BatchLaplaceFn& F, std::span<const double> times) const
    {
        if (times.empty())
            return {};
        std::vector<Complex> all;
        all.reserve(terms() * times.size());
        for (double t : times) {
            try {
                const auto q = query(t);
                all.insert(all.end(), q.begin(), q.end());
            } catch (const Error& ex) {
                rethrow_with_time(ex, t);
            }
        }
        const auto samples = F(all);
        if (samples.size() != all.size())
            throw DomainError("invert_batch: F returned the wrong number of samples");
        std::vector<double> out(times.size());
        const std::size_t b = terms();
        for (std::size_t i = 0; i < times.size(); ++i) {
            try {
                out[i] = compute(times[i], std::span(samples).subspan(i * b, b));
            } catch (const Error& ex) {
                rethrow_with_time(ex, times[i]);
            }
        }
        return out;
    }

private:
    [[noreturn]] static void rethrow_with_time(const Error& ex, double t)
    {
        const std::string msg = std::string(ex.what()) + " (at t = " + std::to_string(t) + ")";
        if (dynamic_cast<const DomainError*>(&ex))
            throw DomainError(msg);
        if (dynamic_cast<const NumericalError*>(&ex))
            throw NumericalError(msg);
        if (dynamic_cast<const ConfigError*>(&ex))
            throw ConfigError(msg);
        throw Error(msg);
    }

    IltConfig config_;
    std::optional<CmeCoefficients> cme_;
};

} // namespace nlaplace
