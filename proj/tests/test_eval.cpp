#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>
#include <sstream>

#include <gtest/gtest.h>

#include <nlaplace/eval.hpp>

using namespace nlaplace;
using namespace nlaplace::eval;

namespace {

States random_states(std::size_t n, std::size_t D, std::uint64_t seed)
{
    std::mt19937_64 g(seed);
    std::normal_distribution<double> nd;
    States s(n, std::vector<double>(D));
    for (auto& row : s)
        for (auto& v : row)
            v = nd(g);
    return s;
}

dynamics::TrajectorySet spiral(std::size_t n_traj = 20, std::size_t n_points = 40)
{
    return dynamics::generate_dataset(dynamics::SystemSpec::defaults(dynamics::SystemKind::SpiralDDE), n_traj,
                                      n_points, 3, 0.0, 1);
}

model::ModelConfig small_config(int D, int N = 16)
{
    model::ModelConfig c;
    c.encoder = {2, 8, 2};
    c.rep.layers = 2;
    c.rep.units = 8;
    c.rep.state_dim = D;
    c.ilt = {IltAlgorithm::Fsi, N, std::nullopt};
    return c;
}

std::vector<std::string> split_lines(const std::string& s)
{
    std::vector<std::string> out;
    std::istringstream in(s);
    for (std::string line; std::getline(in, line);)
        out.push_back(line);
    return out;
}

std::vector<std::string> split_fields(const std::string& line)
{
    std::vector<std::string> out;
    std::istringstream in(line);
    for (std::string f; std::getline(in, f, ',');)
        out.push_back(f);
    return out;
}

} // namespace

TEST(Rmse, Examples)
{
    const States a = random_states(15, 2, 1);
    EXPECT_EQ(rmse(a, a), 0.0);
    States x{{1.0}, {-3.0}, {0.5}}, y = x;
    for (auto& r : y)
        r[0] += 2.0;
    EXPECT_DOUBLE_EQ(rmse(x, y), 2.0);
}

TEST(Rmse, MatchesBruteForce)
{
    const States a = random_states(37, 3, 2), b = random_states(37, 3, 3);
    long double sq = 0.0L;
    for (std::size_t i = 0; i < a.size(); ++i)
        for (std::size_t d = 0; d < 3; ++d)
            sq += static_cast<long double>(a[i][d] - b[i][d]) * (a[i][d] - b[i][d]);
    EXPECT_NEAR(rmse(a, b), static_cast<double>(std::sqrt(sq / (37 * 3))), 1e-14);
}

TEST(Rmse, ShapeMismatchThrows)
{
    EXPECT_THROW(rmse(random_states(3, 2, 1), random_states(4, 2, 1)), Error);
    EXPECT_THROW(rmse(random_states(3, 2, 1), random_states(3, 1, 1)), Error);
}

TEST(Rmse, InvariantUnderJointPermutation)
{
    States a = random_states(50, 2, 4), b = random_states(50, 2, 5);
    const double r0 = rmse(a, b);
    std::vector<std::size_t> perm(50);
    std::iota(perm.begin(), perm.end(), 0);
    std::shuffle(perm.begin(), perm.end(), std::mt19937_64(9));
    States pa, pb;
    for (auto i : perm) {
        pa.push_back(a[i]);
        pb.push_back(b[i]);
    }
    EXPECT_NEAR(rmse(pa, pb), r0, 1e-15);
}

TEST(Stats, MeanStdMedian)
{
    const std::vector<double> v{1.0, 2.0, 3.0, 4.0};
    EXPECT_DOUBLE_EQ(mean_of(v), 2.5);
    EXPECT_DOUBLE_EQ(median_of(v), 2.5);
    EXPECT_DOUBLE_EQ(median_of({5.0, 1.0, 3.0}), 3.0);
    EXPECT_GT(std_of(v), 0.0);
    EXPECT_EQ(std_of(std::vector<double>{7.0, 7.0}), 0.0);
}

TEST(ExtrapolationEval, TruthPredictorScoresZero)
{
    const auto ds = spiral();
    TruthPredictor p;
    const auto rep = extrapolation_eval(p, ds);
    EXPECT_EQ(rep.per_trajectory.size(), ds.split.test.size());
    EXPECT_EQ(rep.mean_rmse, 0.0);
    EXPECT_EQ(rep.mean_rmse_normalized, 0.0);
}

TEST(ExtrapolationEval, MeanPredictorMatchesDatasetStatistics)
{
    const auto ds = spiral();
    MeanPredictor p(ds.norm);
    const auto rep = extrapolation_eval(p, ds);
    for (const auto& s : rep.per_trajectory) {
        const auto& tr = ds.by_id(s.id);
        const std::size_t n0 = tr.times.size() / 2;
        double sq = 0.0, sqn = 0.0;
        std::size_t cnt = 0;
        for (std::size_t i = n0; i < tr.times.size(); ++i)
            for (std::size_t d = 0; d < tr.dim(); ++d) {
                const double dev = tr.states[i][d] - ds.norm.mean[d];
                sq += dev * dev;
                sqn += dev * dev / (ds.norm.std[d] * ds.norm.std[d]);
                ++cnt;
            }
        EXPECT_NEAR(s.rmse, std::sqrt(sq / cnt), 1e-12);
        EXPECT_NEAR(s.rmse_normalized, std::sqrt(sqn / cnt), 1e-12);
    }
}

TEST(ExtrapolationEval, ReportIsSortedAndRecomputable)
{
    const auto ds = spiral();
    MeanPredictor p(ds.norm);
    std::vector<int> ids(ds.split.test.rbegin(), ds.split.test.rend());
    const auto rep = extrapolation_eval(p, ds, ids);
    ASSERT_TRUE(std::is_sorted(rep.per_trajectory.begin(), rep.per_trajectory.end(),
                               [](const auto& a, const auto& b) { return a.id < b.id; }));
    std::vector<double> r;
    for (const auto& s : rep.per_trajectory)
        r.push_back(s.rmse);
    EXPECT_DOUBLE_EQ(rep.mean_rmse, mean_of(r));
    EXPECT_DOUBLE_EQ(rep.std_rmse, std_of(r));

    const json j = rep.to_json();
    EXPECT_EQ(j.at("n_trajectories").get<std::size_t>(), r.size());
    EXPECT_EQ(j.at("per_trajectory").size(), r.size());
    const auto lines = split_lines(rep.to_csv());
    ASSERT_EQ(lines.size(), r.size() + 1);
    EXPECT_EQ(lines[0], "id,rmse,rmse_normalized");
    double csv_mean = 0.0;
    for (std::size_t i = 1; i < lines.size(); ++i)
        csv_mean += std::stod(split_fields(lines[i])[1]);
    EXPECT_NEAR(csv_mean / r.size(), rep.mean_rmse, 1e-14);
}

TEST(ExtrapolationEval, DeterministicForModel)
{
    auto ds = spiral(10, 30);
    model::NeuralLaplace m(small_config(2, 4), 11);
    m.set_normalization(ds.norm);
    const auto a = extrapolation_eval(m, ds);
    const auto b = extrapolation_eval(m, ds);
    EXPECT_EQ(a.to_json().dump(), b.to_json().dump());
    EXPECT_TRUE(std::isfinite(a.mean_rmse));
}

TEST(CheckCompatible, DimensionAndNormalization)
{
    auto ds = spiral(10, 20);
    model::NeuralLaplace m(small_config(2, 4), 1);
    m.set_normalization(ds.norm);
    EXPECT_NO_THROW(check_compatible(m, ds));
    model::NeuralLaplace m1(small_config(1, 4), 1);
    EXPECT_THROW(check_compatible(m1, ds), IncompatibleError);
    auto other = ds;
    other.norm.mean[0] += 1e-3;
    EXPECT_THROW(check_compatible(m, other), IncompatibleError);
}

TEST(IltBenchmark, PaperBands)
{
    const std::vector<IltAlgorithm> algs{IltAlgorithm::Fsi, IltAlgorithm::DeHoog, IltAlgorithm::Stehfest,
                                         IltAlgorithm::FixedTalbot, IltAlgorithm::Cme};
    const auto rows = ilt_benchmark(algs, BenchSpec{});
    ASSERT_EQ(rows.size(), 5u);
    for (const auto& r : rows) {
        EXPECT_TRUE(std::isfinite(r.rmse));
        EXPECT_GE(r.seconds_per_point, 0.0);
        EXPECT_EQ(r.degree, 16);
    }
    EXPECT_GE(rows[0].rmse, 0.005);
    EXPECT_LE(rows[0].rmse, 0.05);
    EXPECT_LT(rows[1].rmse, 1e-6);
    EXPECT_GT(rows[2].rmse, 0.1);
    EXPECT_EQ(rows[0].terms, 33u);
}

TEST(IltBenchmark, TimesGrid)
{
    const auto t = bench_times(BenchSpec{});
    ASSERT_EQ(t.size(), 1000u);
    EXPECT_DOUBLE_EQ(t.front(), 0.01);
    EXPECT_DOUBLE_EQ(t.back(), 10.0);
}

TEST(IltBenchmark, MissingCmeTableThrows)
{
    BenchSpec s;
    s.cme_coefficients = "/nonexistent/cme.json";
    const std::vector<IltAlgorithm> algs{IltAlgorithm::Cme};
    EXPECT_THROW(ilt_benchmark(algs, s), Error);
}

TEST(IltBenchmark, CsvShape)
{
    const std::vector<IltAlgorithm> algs{IltAlgorithm::Fsi, IltAlgorithm::FixedTalbot};
    BenchSpec s;
    s.points = 50;
    const auto lines = split_lines(bench_csv(ilt_benchmark(algs, s)));
    ASSERT_EQ(lines.size(), 3u);
    EXPECT_EQ(lines[0], "algorithm,N,terms,rmse,seconds_per_point");
    EXPECT_EQ(split_fields(lines[1]).size(), 5u);
    EXPECT_EQ(split_fields(lines[1])[1], "16");
}

TEST(CountNfe, SingleFuturePointIsConstant)
{
    auto ds = spiral(10, 20);
    model::NeuralLaplace m(small_config(2), 2);
    m.set_normalization(ds.norm);
    const std::vector<double> sweep{1.0, 10.0, 100.0};
    const auto c = count_nfe(m, ds.trajectories[0], NfeMode::SingleFuturePoint, sweep);
    ASSERT_EQ(c.size(), 3u);
    for (const auto& x : c)
        EXPECT_EQ(x.count, 33);
}

TEST(CountNfe, LinearInPointCount)
{
    auto ds = spiral(10, 20);
    model::NeuralLaplace m(small_config(2), 2);
    m.set_normalization(ds.norm);
    const std::vector<double> sweep{1.0, 10.0, 25.0, 100.0};
    const auto c = count_nfe(m, ds.trajectories[0], NfeMode::PointsInFixedInterval, sweep);
    EXPECT_EQ(c[0].count, 33);
    EXPECT_EQ(c[1].count, 330);
    EXPECT_EQ(c[2].count, 25 * 33);
    EXPECT_EQ(c[3].count, 3300);

    model::NeuralLaplace m8(small_config(2, 8), 2);
    m8.set_normalization(ds.norm);
    const auto c8 = count_nfe(m8, ds.trajectories[0], NfeMode::PointsInFixedInterval, sweep);
    for (std::size_t i = 0; i < sweep.size(); ++i)
        EXPECT_EQ(c8[i].count, 17 * static_cast<long>(sweep[i]));
}

TEST(ExportPlot, ColumnsAndExactTimes)
{
    auto ds = spiral(10, 20);
    model::NeuralLaplace m(small_config(2, 4), 2);
    m.set_normalization(ds.norm);
    const auto& tr = ds.trajectories[3];
    const auto lines = split_lines(export_plot_csv(m, tr));
    ASSERT_EQ(lines.size(), tr.times.size() + 1);
    EXPECT_EQ(lines[0], "t,truth_0,truth_1,pred_0,pred_1");
    for (std::size_t i = 0; i < tr.times.size(); ++i) {
        const auto f = split_fields(lines[i + 1]);
        ASSERT_EQ(f.size(), 5u);
        EXPECT_EQ(std::stod(f[0]), tr.times[i]);
        EXPECT_EQ(std::stod(f[1]), tr.states[i][0]);
        EXPECT_EQ(std::stod(f[2]), tr.states[i][1]);
        if (i < tr.times.size() / 2)
            EXPECT_EQ(std::stod(f[3]), tr.states[i][0]);
    }
}

TEST(ExportPlot, TruthStubReproducesTruth)
{
    auto ds = spiral(10, 20);
    TruthPredictor p;
    const auto lines = split_lines(export_plot_csv(p, ds.trajectories[0]));
    for (std::size_t i = 1; i < lines.size(); ++i) {
        const auto f = split_fields(lines[i]);
        EXPECT_EQ(f[1], f[3]);
        EXPECT_EQ(f[2], f[4]);
    }
}

TEST(FilterToy, DatasetShapes)
{
    FilterToyConfig cfg;
    cfg.n_traj = 20;
    cfg.n_points = 50;
    const auto noisy = filter_toy_dataset(cfg, true);
    const auto clean = filter_toy_dataset(cfg, false);
    ASSERT_EQ(noisy.trajectories.size(), 20u);
    EXPECT_EQ(noisy.split.test, clean.split.test);
    for (std::size_t i = 0; i < 50; ++i) {
        const double t = noisy.trajectories[2].times[i] + noisy.trajectories[2].init.at("shift").get<double>();
        EXPECT_NEAR(noisy.trajectories[2].states[i][0] - clean.trajectories[2].states[i][0],
                    0.5 * std::sin(11.0 * t), 1e-12);
    }
}

TEST(FilterToy, ShortRunIsFinite)
{
    FilterToyConfig cfg;
    cfg.n_traj = 10;
    cfg.n_points = 40;
    cfg.train.epochs = 2;
    const auto r = frequency_filter_toy(cfg);
    EXPECT_EQ(r.epochs_run, 2);
    EXPECT_TRUE(std::isfinite(r.rmse_to_clean));
    EXPECT_TRUE(std::isfinite(r.rmse_to_corrupted));
}
