#pragma once

// Neural Laplace model: reverse-time GRU encoder -> latent p, an MLP over
// Riemann-sphere coordinates giving F(s), and ILT decoding.

#include <algorithm>
#include <atomic>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <functional>
#include <numbers>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "complex_geometry.hpp"
#include "dynamics.hpp"
#include "error.hpp"
#include "ilt.hpp"
#include "nn_core.hpp"
#include "rng.hpp"

namespace nlaplace::model {

using nn::Mat;
using nn::Tape;
using nn::Var;
using json = nlohmann::json;

inline constexpr int kCheckpointFormatVersion = 1;

struct EncoderConfig
{
    int gru_layers = 2;
    int hidden_units = 21;
    int latent_dim = 2;
};

struct RepNetConfig
{
    int layers = 3;
    int units = 42;
    int state_dim = 1;
    std::optional<double> phi_max;
    /// Ablation: raw (Re s, Im s) in, raw (Re F, Im F) out.
    bool no_projection = false;
};

struct ModelConfig
{
    EncoderConfig encoder;
    RepNetConfig rep;
    IltConfig ilt;

    json to_json() const
    {
        json j{{"encoder",
                {{"gru_layers", encoder.gru_layers},
                 {"hidden_units", encoder.hidden_units},
                 {"latent_dim", encoder.latent_dim}}},
               {"rep_net",
                {{"layers", rep.layers},
                 {"units", rep.units},
                 {"state_dim", rep.state_dim},
                 {"phi_max", rep.phi_max ? json(*rep.phi_max) : json(nullptr)},
                 {"no_projection", rep.no_projection}}},
               {"ilt", {{"algorithm", to_string(ilt.algorithm)}, {"N", ilt.degree}}}};
        if (ilt.cme_coeff_source)
            j["ilt"]["cme_coefficients"] = *ilt.cme_coeff_source;
        return j;
    }

    static ModelConfig from_json(const json& j)
    {
        ModelConfig c;
        const auto& e = j.at("encoder");
        c.encoder.gru_layers = e.at("gru_layers").get<int>();
        c.encoder.hidden_units = e.at("hidden_units").get<int>();
        c.encoder.latent_dim = e.at("latent_dim").get<int>();
        const auto& r = j.at("rep_net");
        c.rep.layers = r.at("layers").get<int>();
        c.rep.units = r.at("units").get<int>();
        c.rep.state_dim = r.at("state_dim").get<int>();
        if (r.contains("phi_max") && !r.at("phi_max").is_null())
            c.rep.phi_max = r.at("phi_max").get<double>();
        c.rep.no_projection = r.value("no_projection", false);
        c.ilt.algorithm = parse_ilt_algorithm(j.at("ilt").at("algorithm").get<std::string>());
        c.ilt.degree = j.at("ilt").at("N").get<int>();
        if (j.at("ilt").contains("cme_coefficients"))
            c.ilt.cme_coeff_source = j.at("ilt").at("cme_coefficients").get<std::string>();
        return c;
    }
};

/// Observed prefix of a trajectory in normalized units.
struct Window
{
    std::vector<double> times;
    Mat states; // n x D
};

/// Anything that extrapolates a trajectory from its observed prefix.
class Predictor
{
public:
    virtual ~Predictor() = default;
    /// De-normalized states at query_times given the first n_obs samples of traj.
    virtual std::vector<std::vector<double>> predict(const dynamics::Trajectory& traj, std::size_t n_obs,
                                                     std::span<const double> query_times) = 0;
};

class NeuralLaplace : public Predictor
{
public:
    NeuralLaplace(ModelConfig config, std::uint64_t seed)
        : config_(std::move(config))
        , ilt_(config_.ilt)
        , seed_(seed)
    {
        validate();
        build_params();
        init_params(seed);
        norm_.mean.assign(static_cast<std::size_t>(config_.rep.state_dim), 0.0);
        norm_.std.assign(static_cast<std::size_t>(config_.rep.state_dim), 1.0);
    }

    const ModelConfig& config() const { return config_; }
    const InverseLaplace& ilt() const { return ilt_; }
    nn::ParamStore& params() { return params_; }
    const nn::ParamStore& params() const { return params_; }
    std::uint64_t seed() const { return seed_; }

    const dynamics::Normalization& normalization() const { return norm_; }
    void set_normalization(dynamics::Normalization n)
    {
        if (static_cast<int>(n.mean.size()) != config_.rep.state_dim)
            throw IncompatibleError("normalization dimension does not match the model");
        norm_ = std::move(n);
    }

    double time_offset() const { return time_offset_; }
    void set_time_offset(double delta)
    {
        if (!(delta > 0.0) || !std::isfinite(delta))
            throw DomainError("time offset must be positive");
        time_offset_ = delta;
    }

    /// Representation-network evaluations (one per query point s) so far.
    long nfe() const { return nfe_.load(); }
    void reset_nfe() { nfe_ = 0; }

    // --- graph builders -----------------------------------------------------

    /// Latent p (B x K) from B windows of equal length, fed newest to oldest.
    Var encode(Tape& tp, std::span<const Window> windows) const
    {
        if (windows.empty())
            throw DomainError("encode: no windows");
        const std::size_t n = windows[0].times.size();
        const int D = config_.rep.state_dim;
        for (const auto& w : windows) {
            if (w.times.empty())
                throw DomainError("encode: empty observation window");
            if (w.times.size() != n || w.states.rows() != static_cast<Eigen::Index>(n))
                throw DomainError("encode: windows in a batch must share their length");
            if (w.states.cols() != D)
                throw DomainError("encode: state dimension mismatch");
        }
        const auto B = static_cast<Eigen::Index>(windows.size());
        const int L = config_.encoder.gru_layers;
        const int H = config_.encoder.hidden_units;

        std::vector<std::array<Var, 4>> gru(L);
        for (int l = 0; l < L; ++l) {
            const std::string pre = "enc.gru" + std::to_string(l) + ".";
            gru[l] = {param(tp, pre + "Wx"), param(tp, pre + "Wh"), param(tp, pre + "bx"), param(tp, pre + "bh")};
        }
        std::vector<Var> h(L, tp.constant(Mat::Zero(B, H)));
        for (std::size_t step = 0; step < n; ++step) {
            const std::size_t i = n - 1 - step;
            Mat in(B, D + 1);
            for (Eigen::Index b = 0; b < B; ++b) {
                in.row(b).leftCols(D) = windows[b].states.row(static_cast<Eigen::Index>(i));
                in(b, D) = windows[b].times[i];
            }
            Var x = tp.constant(std::move(in));
            for (int l = 0; l < L; ++l) {
                h[l] = nn::gru_cell(tp, x, h[l], gru[l][0], gru[l][1], gru[l][2], gru[l][3]);
                x = h[l];
            }
        }
        return nn::dense(tp, h[L - 1], param(tp, "enc.out.W"), param(tp, "enc.out.b"));
    }

    /// F at the given points. p_rows has one latent row per point.
    /// Output rows x 2D in [Re F | Im F] layout.
    Var laplace_rep(Tape& tp, Var p_rows, std::span<const Complex> points) const
    {
        const auto rows = static_cast<Eigen::Index>(points.size());
        if (tp.value(p_rows).rows() != rows)
            throw DomainError("laplace_rep: one latent row per query point required");
        Mat feat(rows, 2);
        for (Eigen::Index i = 0; i < rows; ++i) {
            const Complex s = points[static_cast<std::size_t>(i)];
            if (config_.rep.no_projection) {
                feat(i, 0) = s.real();
                feat(i, 1) = s.imag();
            } else {
                const auto c = to_sphere(s);
                feat(i, 0) = c.theta;
                feat(i, 1) = static_cast<double>(c.phi);
            }
        }
        nfe_ += rows;
        Var x = nn::concat_cols(tp, {p_rows, tp.constant(std::move(feat))});
        const int layers = config_.rep.layers;
        for (int l = 0; l < layers; ++l) {
            const std::string pre = "rep.l" + std::to_string(l) + ".";
            x = nn::dense(tp, x, param(tp, pre + "W"), param(tp, pre + "b"));
            if (l + 1 < layers)
                x = nn::tanh(tp, x);
        }
        if (config_.rep.no_projection)
            return x;
        const int D = config_.rep.state_dim;
        const auto [lo, hi] = phi_range();
        Var theta = nn::affine(tp, nn::tanh(tp, nn::slice_cols(tp, x, 0, D)), std::numbers::pi);
        Var phi = nn::affine(tp, nn::tanh(tp, nn::slice_cols(tp, x, D, D)), 0.5 * (hi - lo), 0.5 * (hi + lo));
        return nn::from_sphere(tp, theta, phi);
    }

    /// Normalized predictions ((B*T) x D, trajectory-major) at shifted times
    /// (all > 0), one time list of common length T per latent row of p.
    Var decode(Tape& tp, Var p, const std::vector<std::vector<double>>& shifted_times) const
    {
        const auto B = tp.value(p).rows();
        if (static_cast<Eigen::Index>(shifted_times.size()) != B)
            throw DomainError("decode: one time list per latent row required");
        const std::size_t T = shifted_times.empty() ? 0 : shifted_times[0].size();
        const std::size_t b = ilt_.terms();
        std::vector<Complex> points;
        std::vector<Complex> weights;
        points.reserve(B * T * b);
        weights.reserve(B * T * b);
        for (const auto& ts : shifted_times) {
            if (ts.size() != T)
                throw DomainError("decode: all trajectories in a batch need the same number of query times");
            for (double t : ts) {
                if (!(t > 0.0))
                    throw DomainError("decode: shifted query time must be positive, got " + std::to_string(t));
                auto q = ilt_.linear_query(t);
                points.insert(points.end(), q.points.begin(), q.points.end());
                weights.insert(weights.end(), q.weights.begin(), q.weights.end());
            }
        }
        Var p_rows = nn::repeat_rows(tp, p, static_cast<Eigen::Index>(T * b));
        Var F = laplace_rep(tp, p_rows, points);
        return nn::ilt_reduce(tp, F, std::move(weights), static_cast<Eigen::Index>(b));
    }

    /// F_d(s) for one latent vector, without gradients.
    std::vector<Complex> laplace_rep_point(std::span<const double> p, Complex s) const
    {
        Tape tp;
        Mat pm(1, static_cast<Eigen::Index>(p.size()));
        std::copy(p.begin(), p.end(), pm.data());
        const Complex pts[1] = {s};
        const Mat out = tp.value(laplace_rep(tp, tp.constant(pm), pts));
        const int D = config_.rep.state_dim;
        std::vector<Complex> F;
        for (int d = 0; d < D; ++d)
            F.emplace_back(out(0, d), out(0, D + d));
        return F;
    }

    /// Admissible range of the output latitude phi'.
    std::pair<double, double> phi_range() const
    {
        const double lo = -std::numbers::pi / 2.0;
        double hi = std::numbers::pi / 2.0;
        if (config_.rep.phi_max)
            hi = std::min(hi, *config_.rep.phi_max);
        return {lo, hi};
    }

    // --- data plumbing --------------------------------------------------------

    Window make_window(const dynamics::Trajectory& traj, std::size_t n_obs) const
    {
        if (n_obs == 0 || n_obs > traj.times.size())
            throw DomainError("observation window must hold between 1 and all samples");
        const int D = config_.rep.state_dim;
        if (static_cast<int>(traj.dim()) != D)
            throw IncompatibleError("trajectory dimension " + std::to_string(traj.dim()) +
                                    " does not match model state dimension " + std::to_string(D));
        Window w;
        w.times.assign(traj.times.begin(), traj.times.begin() + static_cast<std::ptrdiff_t>(n_obs));
        for (std::size_t i = 1; i < n_obs; ++i)
            if (!(w.times[i] > w.times[i - 1]))
                throw DomainError("observation times must be strictly increasing");
        w.states.resize(static_cast<Eigen::Index>(n_obs), D);
        for (std::size_t i = 0; i < n_obs; ++i)
            for (int d = 0; d < D; ++d)
                w.states(static_cast<Eigen::Index>(i), d) = (traj.states[i][d] - norm_.mean[d]) / norm_.std[d];
        return w;
    }

    std::vector<double> shift_times(double t_last_observed, std::span<const double> times) const
    {
        std::vector<double> out;
        for (double t : times) {
            const double s = t - t_last_observed + time_offset_;
            if (!(s > 0.0))
                throw DomainError("query time " + std::to_string(t) + " maps to non-positive ILT time " +
                                  std::to_string(s));
            out.push_back(s);
        }
        return out;
    }

    std::vector<std::vector<double>> predict(const dynamics::Trajectory& traj, std::size_t n_obs,
                                             std::span<const double> query_times) override
    {
        if (query_times.empty())
            throw DomainError("predict: no query times");
        const Window w = make_window(traj, n_obs);
        Tape tp;
        Var p = encode(tp, std::span(&w, 1));
        const Mat out = tp.value(decode(tp, p, {shift_times(w.times.back(), query_times)}));
        return denormalize(out);
    }

    std::vector<std::vector<double>> denormalize(const Mat& normalized) const
    {
        std::vector<std::vector<double>> out(static_cast<std::size_t>(normalized.rows()));
        for (Eigen::Index i = 0; i < normalized.rows(); ++i)
            for (Eigen::Index d = 0; d < normalized.cols(); ++d)
                out[static_cast<std::size_t>(i)].push_back(normalized(i, d) * norm_.std[d] + norm_.mean[d]);
        return out;
    }

    // --- checkpoints ----------------------------------------------------------

    json checkpoint_json(const nn::AdamState* adam = nullptr, const json& history = json::array(),
                         const json& run_config = json::object()) const
    {
        json params = json::object();
        for (const auto& p : params_)
            params[p.name] = nn::to_json(p.value);
        json ck{{"format_version", kCheckpointFormatVersion},
                {"architecture_config", config_.to_json()},
                {"params", params},
                {"param_order", param_names()},
                {"rng_seed", seed_},
                {"init_scheme", "glorot_uniform weights, zero biases"},
                {"adam_constants", {{"beta1", nn::AdamConfig{}.beta1}, {"beta2", nn::AdamConfig{}.beta2}, {"eps", nn::AdamConfig{}.eps}}},
                {"gradient_clipping", nullptr},
                {"norm", norm_.to_json()},
                {"norm_hash", norm_.hash()},
                {"time_offset", time_offset_},
                {"time_shift", "t' = t - t_last_observed + time_offset"},
                {"variant", {{"stereographic_projection", !config_.rep.no_projection},
                             {"ablation_no_projection", config_.rep.no_projection},
                             {"phi_max", config_.rep.phi_max ? json(*config_.rep.phi_max) : json(nullptr)}}},
                {"training_history", history},
                {"run_config", run_config}};
        if (config_.ilt.algorithm == IltAlgorithm::Cme)
            ck["ilt_convention"] = kCmeConvention;
        if (adam && adam->step > 0) {
            json m = json::array(), v = json::array();
            for (std::size_t i = 0; i < adam->m.size(); ++i) {
                m.push_back(nn::to_json(adam->m[i]));
                v.push_back(nn::to_json(adam->v[i]));
            }
            ck["adam_state"] = {{"step", adam->step}, {"m", m}, {"v", v}};
        }
        return ck;
    }

    static NeuralLaplace from_checkpoint(const json& ck, nn::AdamState* adam = nullptr)
    {
        try {
            if (ck.at("format_version").get<int>() != kCheckpointFormatVersion)
                throw IncompatibleError("unsupported checkpoint format_version " + ck.at("format_version").dump());
            NeuralLaplace m(ModelConfig::from_json(ck.at("architecture_config")), ck.at("rng_seed").get<std::uint64_t>());
            for (auto& p : m.params_) {
                if (!ck.at("params").contains(p.name))
                    throw IncompatibleError("checkpoint lacks parameter '" + p.name + "'");
                Mat v = nn::mat_from_json(ck.at("params").at(p.name));
                if (v.rows() != p.value.rows() || v.cols() != p.value.cols())
                    throw IncompatibleError("checkpoint parameter '" + p.name + "' has the wrong shape");
                p.value = std::move(v);
            }
            m.norm_ = dynamics::Normalization::from_json(ck.at("norm"));
            m.time_offset_ = ck.at("time_offset").get<double>();
            if (adam && ck.contains("adam_state")) {
                adam->step = ck.at("adam_state").at("step").get<long>();
                adam->m.clear();
                adam->v.clear();
                for (const auto& x : ck.at("adam_state").at("m"))
                    adam->m.push_back(nn::mat_from_json(x));
                for (const auto& x : ck.at("adam_state").at("v"))
                    adam->v.push_back(nn::mat_from_json(x));
            }
            return m;
        } catch (const json::exception& e) {
            throw ConfigError(std::string("malformed checkpoint: ") + e.what());
        }
    }

    static NeuralLaplace load(const std::filesystem::path& path, nn::AdamState* adam = nullptr)
    {
        std::ifstream in(path);
        if (!in)
            throw ConfigError("cannot open checkpoint '" + path.string() + "'");
        json ck;
        try {
            ck = json::parse(in);
        } catch (const json::exception& e) {
            throw ConfigError("checkpoint '" + path.string() + "' is not valid JSON: " + e.what());
        }
        return from_checkpoint(ck, adam);
    }

private:
    void validate() const
    {
        if (config_.encoder.gru_layers < 1 || config_.encoder.hidden_units < 1 || config_.encoder.latent_dim < 1)
            throw ConfigError("encoder sizes must be positive");
        if (config_.rep.layers < 1 || config_.rep.units < 1 || config_.rep.state_dim < 1)
            throw ConfigError("representation network sizes must be positive");
        if (!ilt_.is_linear())
            throw ConfigError("de Hoog inversion is not batchable and cannot drive the model; "
                              "choose fsi, stehfest, talbot or cme");
        if (config_.rep.phi_max && !(*config_.rep.phi_max > -std::numbers::pi / 2.0))
            throw ConfigError("phi_max must exceed -pi/2");
    }

    void build_params()
    {
        const int D = config_.rep.state_dim;
        const int H = config_.encoder.hidden_units;
        for (int l = 0; l < config_.encoder.gru_layers; ++l) {
            const std::string pre = "enc.gru" + std::to_string(l) + ".";
            const int in = l == 0 ? D + 1 : H;
            params_.add(pre + "Wx", in, 3 * H);
            params_.add(pre + "Wh", H, 3 * H);
            params_.add(pre + "bx", 1, 3 * H);
            params_.add(pre + "bh", 1, 3 * H);
        }
        params_.add("enc.out.W", H, config_.encoder.latent_dim);
        params_.add("enc.out.b", 1, config_.encoder.latent_dim);
        int in = config_.encoder.latent_dim + 2;
        for (int l = 0; l < config_.rep.layers; ++l) {
            const int out = l + 1 < config_.rep.layers ? config_.rep.units : 2 * D;
            params_.add("rep.l" + std::to_string(l) + ".W", in, out);
            params_.add("rep.l" + std::to_string(l) + ".b", 1, out);
            in = out;
        }
    }

    void init_params(std::uint64_t seed)
    {
        CounterRng rng(seed, 0x1A17);
        for (auto& p : params_)
            if (p.name[p.name.rfind('.') + 1] == 'W') // weights; biases stay zero
                nn::glorot_uniform(p, rng);
    }

    std::vector<std::string> param_names() const
    {
        std::vector<std::string> out;
        for (const auto& p : params_)
            out.push_back(p.name);
        return out;
    }

    Var param(Tape& tp, const std::string& name) const { return tp.param(const_cast<nn::ParamStore&>(params_).get(name)); }

    ModelConfig config_;
    InverseLaplace ilt_;
    std::uint64_t seed_;
    nn::ParamStore params_;
    dynamics::Normalization norm_;
    double time_offset_ = 1.0;
    mutable std::atomic<long> nfe_{0};

public:
    NeuralLaplace(const NeuralLaplace& o)
        : config_(o.config_)
        , ilt_(o.ilt_)
        , seed_(o.seed_)
        , params_(o.params_)
        , norm_(o.norm_)
        , time_offset_(o.time_offset_)
        , nfe_(o.nfe_.load())
    {
    }
    NeuralLaplace(NeuralLaplace&& o) noexcept
        : config_(std::move(o.config_))
        , ilt_(std::move(o.ilt_))
        , seed_(o.seed_)
        , params_(std::move(o.params_))
        , norm_(std::move(o.norm_))
        , time_offset_(o.time_offset_)
        , nfe_(o.nfe_.load())
    {
    }
};

// ---------------------------------------------------------------------------
// Loss

struct LossValue
{
    double mean = 0.0; // optimized
    double sum = 0.0;  // sum over times of squared Euclidean distance
};

inline LossValue loss(const std::vector<std::vector<double>>& pred, const std::vector<std::vector<double>>& truth)
{
    if (pred.size() != truth.size())
        throw DomainError("loss: prediction and truth lengths differ");
    LossValue v;
    std::size_t count = 0;
    for (std::size_t i = 0; i < pred.size(); ++i) {
        if (pred[i].size() != truth[i].size())
            throw DomainError("loss: state dimensions differ");
        for (std::size_t d = 0; d < pred[i].size(); ++d) {
            const double e = pred[i][d] - truth[i][d];
            v.sum += e * e;
            ++count;
        }
    }
    v.mean = count ? v.sum / static_cast<double>(count) : 0.0;
    return v;
}

// ---------------------------------------------------------------------------
// Training

struct TrainConfig
{
    std::uint64_t seed = 0;
    int epochs = 1000;
    double lr = 1e-3;
    int batch_size = 128;
    int patience = 100;
    int latent_dim = 2;
    int gru_layers = 2;
    int hidden_units = 21;
    int rep_layers = 3;
    int rep_units = 42;
    IltConfig ilt{IltAlgorithm::Fsi, 16, std::nullopt};
    std::optional<double> phi_max;
    bool ablation_no_projection = false;
    /// Trajectories decoded per tape; bounds memory, does not change the result.
    int chunk = 2;

    json to_json() const
    {
        json j{{"seed", seed},
               {"epochs", epochs},
               {"lr", lr},
               {"batch_size", batch_size},
               {"patience", patience},
               {"latent_dim", latent_dim},
               {"gru_layers", gru_layers},
               {"hidden_units", hidden_units},
               {"rep_layers", rep_layers},
               {"rep_units", rep_units},
               {"ilt", {{"algorithm", to_string(ilt.algorithm)}, {"N", ilt.degree}}},
               {"phi_max", phi_max ? json(*phi_max) : json(nullptr)},
               {"ablation_no_projection", ablation_no_projection},
               {"chunk", chunk}};
        if (ilt.cme_coeff_source)
            j["ilt"]["cme_coefficients"] = *ilt.cme_coeff_source;
        return j;
    }

    /// Overlays the keys present in j onto this config; on error this config is left untouched.
    void merge(const json& j)
    {
        TrainConfig next = *this;
        next.overlay(j);
        *this = std::move(next);
    }

    void validate() const
    {
        if (epochs < 0)
            throw ConfigError("epochs must be >= 0");
        if (!(lr >= 0.0))
            throw ConfigError("lr must be >= 0");
        if (batch_size < 1 || patience < 1 || latent_dim < 1 || chunk < 1)
            throw ConfigError("batch_size, patience, latent_dim and chunk must be >= 1");
        if (ilt.algorithm == IltAlgorithm::DeHoog)
            throw ConfigError("de Hoog inversion is not batchable and is not available for training");
    }

    ModelConfig model_config(int state_dim) const
    {
        ModelConfig m;
        m.encoder = {gru_layers, hidden_units, latent_dim};
        m.rep.layers = rep_layers;
        m.rep.units = rep_units;
        m.rep.state_dim = state_dim;
        m.rep.phi_max = phi_max;
        m.rep.no_projection = ablation_no_projection;
        m.ilt = ilt;
        return m;
    }

private:
    void overlay(const json& j)
    {
        static const std::vector<std::string> known = {
            "seed", "epochs", "lr", "batch_size", "patience", "latent_dim", "gru_layers", "hidden_units",
            "rep_layers", "rep_units", "ilt", "phi_max", "ablation_no_projection", "chunk"};
        if (!j.is_object())
            throw ConfigError("training config must be a JSON object");
        for (const auto& [k, v] : j.items())
            if (std::find(known.begin(), known.end(), k) == known.end())
                throw ConfigError("unknown training config key '" + k + "'");
        try {
            seed = j.value("seed", seed);
            epochs = j.value("epochs", epochs);
            lr = j.value("lr", lr);
            batch_size = j.value("batch_size", batch_size);
            patience = j.value("patience", patience);
            latent_dim = j.value("latent_dim", latent_dim);
            gru_layers = j.value("gru_layers", gru_layers);
            hidden_units = j.value("hidden_units", hidden_units);
            rep_layers = j.value("rep_layers", rep_layers);
            rep_units = j.value("rep_units", rep_units);
            chunk = j.value("chunk", chunk);
            ablation_no_projection = j.value("ablation_no_projection", ablation_no_projection);
            if (j.contains("phi_max"))
                phi_max = j.at("phi_max").is_null() ? std::nullopt : std::optional<double>(j.at("phi_max").get<double>());
            if (j.contains("ilt")) {
                const auto& i = j.at("ilt");
                if (i.contains("algorithm"))
                    ilt.algorithm = parse_ilt_algorithm(i.at("algorithm").get<std::string>());
                ilt.degree = i.value("N", ilt.degree);
                if (i.contains("cme_coefficients"))
                    ilt.cme_coeff_source = i.at("cme_coefficients").get<std::string>();
            }
        } catch (const json::exception& e) {
            throw ConfigError(std::string("training config: ") + e.what());
        }
        validate();
    }
};

struct EpochRecord
{
    int epoch = 0;
    double train_loss = 0.0;     // mean squared error, normalized units
    double train_loss_sum = 0.0; // summed squared error, normalized units
    double val_rmse = 0.0;       // de-normalized
    double seconds = 0.0;
};

struct TrainResult
{
    std::vector<EpochRecord> history;
    int best_epoch = 0; // 0 = initialization
    double best_val_rmse = 0.0;
    bool early_stopped = false;
    nn::AdamState adam;

    json history_json() const
    {
        json h = json::array();
        for (const auto& r : history)
            h.push_back({{"epoch", r.epoch}, {"train_loss", r.train_loss}, {"train_loss_sum", r.train_loss_sum},
                         {"val_rmse", r.val_rmse}});
        return {{"epochs_run", history.size()},
                {"best_epoch", best_epoch},
                {"best_val_rmse", best_val_rmse},
                {"early_stopped", early_stopped},
                {"per_epoch", h}};
    }
};

/// Observed-prefix length for the encode-first-half / predict-second-half protocol.
inline std::size_t observed_count(std::size_t n_points)
{
    return n_points / 2;
}

namespace detail {

struct Batch
{
    std::vector<Window> windows;
    std::vector<std::vector<double>> times; // shifted
    Mat target;                             // (B*T) x D normalized
};

inline Batch make_batch(const NeuralLaplace& m, const dynamics::TrajectorySet& ds, std::span<const int> ids)
{
    Batch b;
    const int D = m.config().rep.state_dim;
    std::size_t rows = 0;
    for (int id : ids)
        rows += ds.trajectories.at(static_cast<std::size_t>(id)).times.size() -
                observed_count(ds.trajectories.at(static_cast<std::size_t>(id)).times.size());
    b.target.resize(static_cast<Eigen::Index>(rows), D);
    Eigen::Index r = 0;
    const auto& norm = m.normalization();
    for (int id : ids) {
        const auto& tr = ds.trajectories.at(static_cast<std::size_t>(id));
        const std::size_t n_obs = observed_count(tr.times.size());
        b.windows.push_back(m.make_window(tr, n_obs));
        b.times.push_back(m.shift_times(tr.times[n_obs - 1],
                                        std::span(tr.times).subspan(n_obs)));
        for (std::size_t i = n_obs; i < tr.times.size(); ++i, ++r)
            for (int d = 0; d < D; ++d)
                b.target(r, d) = (tr.states[i][d] - norm.mean[d]) / norm.std[d];
    }
    return b;
}

} // namespace detail

/// Normalized-space predictions for the second half of each listed
/// trajectory. Windows are encoded in blocks; decoding runs `chunk`
/// trajectories per tape to keep intermediates cache-sized.
inline Mat predict_split(const NeuralLaplace& m, const dynamics::TrajectorySet& ds, std::span<const int> ids,
                         int chunk = 2)
{
    std::vector<Mat> parts;
    Eigen::Index rows = 0;
    constexpr std::size_t block = 128;
    for (std::size_t s = 0; s < ids.size(); s += block) {
        const auto blk = ids.subspan(s, std::min(block, ids.size() - s));
        const auto b = detail::make_batch(m, ds, blk);
        Mat p;
        {
            Tape tp;
            p = tp.value(m.encode(tp, b.windows));
        }
        for (std::size_t c = 0; c < blk.size(); c += static_cast<std::size_t>(chunk)) {
            const auto n = std::min<std::size_t>(static_cast<std::size_t>(chunk), blk.size() - c);
            Tape tp;
            const std::vector<std::vector<double>> times(b.times.begin() + static_cast<std::ptrdiff_t>(c),
                                                         b.times.begin() + static_cast<std::ptrdiff_t>(c + n));
            Var pc = tp.constant(p.middleRows(static_cast<Eigen::Index>(c), static_cast<Eigen::Index>(n)));
            parts.push_back(tp.value(m.decode(tp, pc, times)));
            rows += parts.back().rows();
        }
    }
    Mat out(rows, m.config().rep.state_dim);
    Eigen::Index r = 0;
    for (const auto& p : parts) {
        out.middleRows(r, p.rows()) = p;
        r += p.rows();
    }
    return out;
}

/// De-normalized RMSE over the second halves of the listed trajectories.
inline double split_rmse(const NeuralLaplace& m, const dynamics::TrajectorySet& ds, std::span<const int> ids,
                         int chunk = 2)
{
    const Mat pred = predict_split(m, ds, ids, chunk);
    const auto& norm = m.normalization();
    double sq = 0.0;
    Eigen::Index r = 0;
    std::size_t count = 0;
    for (int id : ids) {
        const auto& tr = ds.trajectories.at(static_cast<std::size_t>(id));
        for (std::size_t i = observed_count(tr.times.size()); i < tr.times.size(); ++i, ++r)
            for (Eigen::Index d = 0; d < pred.cols(); ++d) {
                const double e = (pred(r, d) - (tr.states[i][d] - norm.mean[d]) / norm.std[d]) * norm.std[d];
                sq += e * e;
                ++count;
            }
    }
    return std::sqrt(sq / static_cast<double>(count));
}

/// Prediction gap used as the ILT time offset: first predicted time minus last observed time.
inline double first_prediction_gap(const dynamics::TrajectorySet& ds)
{
    const auto& tr = ds.trajectories.at(static_cast<std::size_t>(ds.split.train.at(0)));
    const std::size_t n_obs = observed_count(tr.times.size());
    if (n_obs == 0 || n_obs >= tr.times.size())
        throw ConfigError("trajectories need at least two samples");
    return tr.times[n_obs] - tr.times[n_obs - 1];
}

using EpochCallback = std::function<void(const EpochRecord&)>;

/// Algorithm 1: minibatch Adam on the second-half MSE, early stopping on
/// validation RMSE; the model ends holding its best-validation parameters.
inline TrainResult train(NeuralLaplace& model, const dynamics::TrajectorySet& ds, const TrainConfig& cfg,
                         const EpochCallback& on_epoch = {})
{
    cfg.validate();
    if (ds.split.train.empty() || ds.split.val.empty())
        throw ConfigError("training needs non-empty train and validation splits");
    if (ds.dim() != model.config().rep.state_dim)
        throw IncompatibleError("dataset dimension does not match the model");
    model.set_normalization(ds.norm);
    model.set_time_offset(first_prediction_gap(ds));

    TrainResult res;
    res.best_val_rmse = split_rmse(model, ds, ds.split.val, cfg.chunk);
    auto best = model.params().values();
    std::vector<int> order = ds.split.train;
    model.params().zero_grad();

    for (int epoch = 1; epoch <= cfg.epochs; ++epoch) {
        const auto start = std::chrono::steady_clock::now();
        CounterRng shuffle_rng(cfg.seed, 0xE90C0000ULL + static_cast<std::uint64_t>(epoch));
        order = ds.split.train;
        shuffle_rng.shuffle(order);

        double epoch_sq = 0.0;
        std::size_t epoch_count = 0;
        try {
            for (std::size_t s = 0; s < order.size(); s += static_cast<std::size_t>(cfg.batch_size)) {
                const auto batch = std::span(order).subspan(
                    s, std::min<std::size_t>(static_cast<std::size_t>(cfg.batch_size), order.size() - s));
                std::size_t batch_elems = 0;
                for (int id : batch) {
                    const auto n = ds.trajectories[static_cast<std::size_t>(id)].times.size();
                    batch_elems += (n - observed_count(n)) * static_cast<std::size_t>(ds.dim());
                }
                const auto b = detail::make_batch(model, ds, batch);
                // Encode the whole batch once; decode in chunks with p as a
                // gradient-carrying input, then push dL/dp back through the encoder.
                Tape enc;
                Var p = model.encode(enc, b.windows);
                const Mat& pv = enc.value(p);
                Mat dp = Mat::Zero(pv.rows(), pv.cols());
                Eigen::Index row = 0;
                for (std::size_t c = 0; c < batch.size(); c += static_cast<std::size_t>(cfg.chunk)) {
                    const auto n = std::min<std::size_t>(static_cast<std::size_t>(cfg.chunk), batch.size() - c);
                    const std::vector<std::vector<double>> times(b.times.begin() + static_cast<std::ptrdiff_t>(c),
                                                                 b.times.begin() + static_cast<std::ptrdiff_t>(c + n));
                    Eigen::Index target_rows = 0;
                    for (const auto& ts : times)
                        target_rows += static_cast<Eigen::Index>(ts.size());
                    const Mat target = b.target.middleRows(row, target_rows);
                    row += target_rows;

                    Tape dec;
                    Var pc = dec.input(pv.middleRows(static_cast<Eigen::Index>(c), static_cast<Eigen::Index>(n)));
                    Var pred = model.decode(dec, pc, times);
                    const double frac = static_cast<double>(target.size()) / static_cast<double>(batch_elems);
                    Var l = nn::affine(dec, nn::mse(dec, pred, target), frac);
                    const double chunk_sq = dec.value(l)(0, 0) * static_cast<double>(batch_elems);
                    if (!std::isfinite(chunk_sq))
                        throw NumericalError("non-finite training loss");
                    epoch_sq += chunk_sq;
                    epoch_count += static_cast<std::size_t>(target.size());
                    dec.backward(l);
                    if (dec.grad(pc).size() != 0)
                        dp.middleRows(static_cast<Eigen::Index>(c), static_cast<Eigen::Index>(n)) = dec.grad(pc);
                }
                enc.backward(p, dp);
                nn::adam_step(model.params(), res.adam, cfg.lr);
            }
        } catch (const NumericalError& e) {
            throw NumericalError("training diverged at epoch " + std::to_string(epoch) + ": " + e.what());
        }

        EpochRecord rec;
        rec.epoch = epoch;
        rec.train_loss = epoch_sq / static_cast<double>(epoch_count);
        rec.train_loss_sum = epoch_sq;
        try {
            rec.val_rmse = split_rmse(model, ds, ds.split.val, cfg.chunk);
        } catch (const NumericalError& e) {
            throw NumericalError("training diverged at epoch " + std::to_string(epoch) + " (validation): " + e.what());
        }
        rec.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
        res.history.push_back(rec);
        if (on_epoch)
            on_epoch(rec);
        if (rec.val_rmse < res.best_val_rmse) {
            res.best_val_rmse = rec.val_rmse;
            res.best_epoch = epoch;
            best = model.params().values();
        } else if (epoch - res.best_epoch >= cfg.patience) {
            res.early_stopped = true;
            break;
        }
    }
    model.params().set_values(best);
    return res;
}

} // namespace nlaplace::model
