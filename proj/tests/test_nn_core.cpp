#include <cmath>
#include <functional>
#include <numbers>
#include <random>

#include <gtest/gtest.h>

#include <nlaplace/ilt.hpp>
#include <nlaplace/nn_core.hpp>

using namespace nlaplace;
using namespace nlaplace::nn;

namespace {

Mat random_mat(Eigen::Index r, Eigen::Index c, std::uint64_t seed, double scale = 1.0)
{
    std::mt19937_64 g(seed);
    std::normal_distribution<double> n(0.0, scale);
    Mat m(r, c);
    for (Eigen::Index i = 0; i < m.size(); ++i)
        m.data()[i] = n(g);
    return m;
}

Param& add_random(ParamStore& ps, const std::string& name, Eigen::Index r, Eigen::Index c, std::uint64_t seed,
                  double scale = 1.0)
{
    auto& p = ps.add(name, r, c);
    p.value = random_mat(r, c, seed, scale);
    return p;
}

// Weighted sum with fixed random weights so every output entry matters.
Var probe(Tape& tp, Var out, std::uint64_t seed = 99)
{
    const Mat& v = tp.value(out);
    return sum(tp, mul(tp, out, tp.constant(random_mat(v.rows(), v.cols(), seed))));
}

void expect_grad_ok(const Program& prog, ParamStore& ps, double tol = 1e-6)
{
    const auto r = grad_check(prog, ps, 1e-6);
    EXPECT_GT(r.checked, 0u);
    EXPECT_LT(r.max_relative_error, tol) << "worst entry " << r.worst;
}

} // namespace

// --- forward examples -----------------------------------------------------------

TEST(Forward, ZeroWeightDenseGivesBias)
{
    Tape tp;
    Mat b(1, 3);
    b << 1.5, -2.0, 0.25;
    Var y = dense(tp, tp.constant(random_mat(5, 4, 1)), tp.constant(Mat::Zero(4, 3)), tp.constant(b));
    for (Eigen::Index i = 0; i < 5; ++i)
        EXPECT_EQ(tp.value(y).row(i), b);
}

TEST(Forward, TanhOfZero)
{
    Tape tp;
    Var y = tanh(tp, tp.constant(Mat::Zero(3, 7)));
    EXPECT_TRUE(tp.value(y).isZero(0.0));
}

TEST(Forward, TanhMatchesStd)
{
    Tape tp;
    Mat x(1, 13);
    x << -30, -5, -1, -1e-3, -1e-4, -1e-9, 0, 1e-9, 1e-4, 1e-3, 0.5, 3, 25;
    Var y = tanh(tp, tp.constant(x));
    for (Eigen::Index i = 0; i < x.size(); ++i)
        EXPECT_NEAR(tp.value(y)(0, i), std::tanh(x(0, i)), 4e-16 + 4e-16 * std::abs(std::tanh(x(0, i))));
}

TEST(Forward, ZeroGruKeepsZeroHidden)
{
    Tape tp;
    const int H = 6, I = 3;
    Var h = tp.constant(Mat::Zero(4, H));
    for (int step = 0; step < 5; ++step)
        h = gru_cell(tp, tp.constant(random_mat(4, I, step)), h, tp.constant(Mat::Zero(I, 3 * H)),
                     tp.constant(Mat::Zero(H, 3 * H)), tp.constant(Mat::Zero(1, 3 * H)),
                     tp.constant(Mat::Zero(1, 3 * H)));
    EXPECT_TRUE(tp.value(h).isZero(0.0));
}

TEST(Forward, GruOutputBounded)
{
    Tape tp;
    const int H = 5, I = 2;
    Var h = tp.constant(Mat::Zero(8, H));
    for (int step = 0; step < 20; ++step)
        h = gru_cell(tp, tp.constant(random_mat(8, I, step, 10.0)), h, tp.constant(random_mat(I, 3 * H, 1, 3.0)),
                     tp.constant(random_mat(H, 3 * H, 2, 3.0)), tp.constant(random_mat(1, 3 * H, 3)),
                     tp.constant(random_mat(1, 3 * H, 4)));
    // saturated tanh rounds to exactly 1 in double; the open bound holds for moderate inputs
    EXPECT_LE(tp.value(h).cwiseAbs().maxCoeff(), 1.0);

    Var h2 = tp.constant(Mat::Zero(8, H));
    for (int step = 0; step < 20; ++step)
        h2 = gru_cell(tp, tp.constant(random_mat(8, I, step)), h2, tp.constant(random_mat(I, 3 * H, 1)),
                      tp.constant(random_mat(H, 3 * H, 2)), tp.constant(random_mat(1, 3 * H, 3)),
                      tp.constant(random_mat(1, 3 * H, 4)));
    EXPECT_LT(tp.value(h2).cwiseAbs().maxCoeff(), 1.0);
}

TEST(Forward, ShapeMismatchThrows)
{
    Tape tp;
    EXPECT_THROW(add(tp, tp.constant(Mat::Zero(2, 3)), tp.constant(Mat::Zero(3, 2))), Error);
    EXPECT_THROW(matmul(tp, tp.constant(Mat::Zero(2, 3)), tp.constant(Mat::Zero(2, 3))), Error);
    EXPECT_THROW(mse(tp, tp.constant(Mat::Zero(2, 3)), Mat::Zero(3, 3)), Error);
}

TEST(Forward, NonFiniteReportsNode)
{
    Tape tp;
    Mat big(1, 1);
    big << 1e300;
    Var a = tp.constant(big);
    try {
        (void)mul(tp, a, a);
        FAIL() << "expected NumericalError";
    } catch (const NumericalError& e) {
        EXPECT_NE(std::string(e.what()).find("mul"), std::string::npos) << e.what();
        EXPECT_NE(std::string(e.what()).find("node"), std::string::npos) << e.what();
    }
}

TEST(Forward, Deterministic)
{
    auto run = [] {
        ParamStore ps;
        add_random(ps, "W", 4, 3, 1);
        add_random(ps, "b", 1, 3, 2);
        Tape tp;
        Var y = tanh(tp, dense(tp, tp.constant(random_mat(10, 4, 3)), tp.param(ps.get("W")), tp.param(ps.get("b"))));
        Var l = probe(tp, y);
        tp.backward(l);
        return std::pair{tp.value(y), std::pair{ps.get("W").grad, ps.get("b").grad}};
    };
    const auto a = run(), b = run();
    EXPECT_EQ(a.first, b.first);
    EXPECT_EQ(a.second.first, b.second.first);
    EXPECT_EQ(a.second.second, b.second.second);
}

// --- backward examples -----------------------------------------------------------

TEST(Backward, IdentityDenseBiasGradientIsOnes)
{
    ParamStore ps;
    auto& W = ps.add("W", 3, 3);
    W.value = Mat::Identity(3, 3);
    ps.add("b", 1, 3);
    Tape tp;
    Var y = dense(tp, tp.constant(random_mat(4, 3, 1)), tp.param(W), tp.param(ps.get("b")));
    tp.backward(sum(tp, y));
    // the bias is broadcast over 4 rows
    EXPECT_TRUE(ps.get("b").grad.isApprox(Mat::Constant(1, 3, 4.0)));

    ParamStore one;
    auto& W1 = one.add("W", 3, 3);
    W1.value = Mat::Identity(3, 3);
    one.add("b", 1, 3);
    Tape t1;
    Var y1 = dense(t1, t1.constant(random_mat(1, 3, 1)), t1.param(W1), t1.param(one.get("b")));
    t1.backward(sum(t1, y1));
    EXPECT_EQ(one.get("b").grad, Mat::Ones(1, 3));
}

TEST(Backward, TanhAtZeroHasUnitSlope)
{
    Tape tp;
    Var x = tp.input(Mat::Zero(2, 5));
    tp.backward(sum(tp, tanh(tp, x)));
    EXPECT_EQ(tp.grad(x), Mat::Ones(2, 5));
}

TEST(Backward, WithoutForwardThrows)
{
    Tape tp;
    EXPECT_THROW(tp.backward(Var{}), Error);
    EXPECT_THROW(tp.backward(Var{3}), Error);
}

TEST(Backward, GradientsAccumulateAcrossCalls)
{
    ParamStore ps;
    add_random(ps, "a", 2, 2, 1);
    for (int i = 0; i < 2; ++i) {
        Tape tp;
        tp.backward(sum(tp, tp.param(ps.get("a"))));
    }
    EXPECT_EQ(ps.get("a").grad, Mat::Constant(2, 2, 2.0));
}

// --- per-primitive gradient checks ------------------------------------------------

TEST(GradCheck, Add)
{
    ParamStore ps;
    add_random(ps, "a", 3, 4, 1);
    add_random(ps, "b", 3, 4, 2);
    expect_grad_ok([](Tape& tp, ParamStore& p) {
        return probe(tp, add(tp, tp.param(p.get("a")), tp.param(p.get("b"))));
    }, ps);
}

TEST(GradCheck, Sub)
{
    ParamStore ps;
    add_random(ps, "a", 3, 4, 1);
    add_random(ps, "b", 3, 4, 2);
    expect_grad_ok([](Tape& tp, ParamStore& p) {
        return probe(tp, sub(tp, tp.param(p.get("a")), tp.param(p.get("b"))));
    }, ps);
}

TEST(GradCheck, Mul)
{
    ParamStore ps;
    add_random(ps, "a", 3, 4, 1);
    add_random(ps, "b", 3, 4, 2);
    expect_grad_ok([](Tape& tp, ParamStore& p) {
        return probe(tp, mul(tp, tp.param(p.get("a")), tp.param(p.get("b"))));
    }, ps);
}

TEST(GradCheck, Affine)
{
    ParamStore ps;
    add_random(ps, "a", 3, 4, 1);
    expect_grad_ok([](Tape& tp, ParamStore& p) { return probe(tp, affine(tp, tp.param(p.get("a")), -2.5, 0.75)); },
                   ps);
}

TEST(GradCheck, Matmul)
{
    ParamStore ps;
    add_random(ps, "a", 3, 5, 1);
    add_random(ps, "b", 5, 2, 2);
    expect_grad_ok([](Tape& tp, ParamStore& p) {
        return probe(tp, matmul(tp, tp.param(p.get("a")), tp.param(p.get("b"))));
    }, ps);
}

TEST(GradCheck, Dense)
{
    ParamStore ps;
    add_random(ps, "x", 6, 4, 1);
    add_random(ps, "W", 4, 3, 2);
    add_random(ps, "b", 1, 3, 3);
    expect_grad_ok([](Tape& tp, ParamStore& p) {
        return probe(tp, dense(tp, tp.param(p.get("x")), tp.param(p.get("W")), tp.param(p.get("b"))));
    }, ps);
}

TEST(GradCheck, Tanh)
{
    ParamStore ps;
    add_random(ps, "a", 4, 5, 1, 1.5);
    ps.get("a").value(0, 0) = 1e-4; // series branch
    expect_grad_ok([](Tape& tp, ParamStore& p) { return probe(tp, tanh(tp, tp.param(p.get("a")))); }, ps);
}

TEST(GradCheck, Sigmoid)
{
    ParamStore ps;
    add_random(ps, "a", 4, 5, 1, 2.0);
    expect_grad_ok([](Tape& tp, ParamStore& p) { return probe(tp, sigmoid(tp, tp.param(p.get("a")))); }, ps);
}

TEST(GradCheck, ConcatAndSlice)
{
    ParamStore ps;
    add_random(ps, "a", 3, 2, 1);
    add_random(ps, "b", 3, 4, 2);
    expect_grad_ok([](Tape& tp, ParamStore& p) {
        Var c = concat_cols(tp, {tp.param(p.get("a")), tp.constant(random_mat(3, 1, 5)), tp.param(p.get("b"))});
        return probe(tp, slice_cols(tp, c, 1, 4));
    }, ps);
}

TEST(GradCheck, RepeatRows)
{
    ParamStore ps;
    add_random(ps, "a", 2, 3, 1);
    expect_grad_ok([](Tape& tp, ParamStore& p) { return probe(tp, repeat_rows(tp, tp.param(p.get("a")), 4)); }, ps);
}

TEST(GradCheck, SumMeanMse)
{
    ParamStore ps;
    add_random(ps, "a", 3, 3, 1);
    const Mat target = random_mat(3, 3, 7);
    expect_grad_ok([&](Tape& tp, ParamStore& p) {
        Var a = tp.param(p.get("a"));
        return add(tp, add(tp, sum(tp, a), mean(tp, mul(tp, a, a))), mse(tp, a, target));
    }, ps);
}

TEST(GradCheck, GruCell)
{
    const int H = 4, I = 3, B = 5;
    ParamStore ps;
    add_random(ps, "x", B, I, 1);
    add_random(ps, "h", B, H, 2, 0.5);
    add_random(ps, "Wx", I, 3 * H, 3, 0.7);
    add_random(ps, "Wh", H, 3 * H, 4, 0.7);
    add_random(ps, "bx", 1, 3 * H, 5, 0.3);
    add_random(ps, "bh", 1, 3 * H, 6, 0.3);
    expect_grad_ok([](Tape& tp, ParamStore& p) {
        Var h = tp.param(p.get("h"));
        Var x = tp.param(p.get("x"));
        for (int s = 0; s < 2; ++s)
            h = gru_cell(tp, x, h, tp.param(p.get("Wx")), tp.param(p.get("Wh")), tp.param(p.get("bx")),
                         tp.param(p.get("bh")));
        return probe(tp, h);
    }, ps);
}

TEST(GradCheck, FromSphere)
{
    ParamStore ps;
    add_random(ps, "theta", 4, 2, 1, 1.5);
    add_random(ps, "phi", 4, 2, 2, 0.5);
    expect_grad_ok([](Tape& tp, ParamStore& p) {
        return probe(tp, from_sphere(tp, tp.param(p.get("theta")), tp.param(p.get("phi"))));
    }, ps);
}

TEST(GradCheck, IltReduce)
{
    const auto lq1 = fsi_linear_query(1.5, 3);
    const auto lq2 = fsi_linear_query(4.0, 3);
    std::vector<Complex> w = lq1.weights;
    w.insert(w.end(), lq2.weights.begin(), lq2.weights.end());
    ParamStore ps;
    add_random(ps, "F", 14, 4, 1); // two groups of 7 rows, D = 2
    expect_grad_ok([&](Tape& tp, ParamStore& p) { return probe(tp, ilt_reduce(tp, tp.param(p.get("F")), w, 7)); },
                   ps);
}

TEST(IltReduce, MatchesLinearQueryReduce)
{
    const auto lq = fsi_linear_query(2.0, 4);
    Mat F(9, 2);
    std::vector<Complex> samples;
    for (int k = 0; k < 9; ++k) {
        const Complex v = 1.0 / (lq.points[k] + 1.0);
        samples.push_back(v);
        F(k, 0) = v.real();
        F(k, 1) = v.imag();
    }
    Tape tp;
    Var y = ilt_reduce(tp, tp.constant(F), lq.weights, 9);
    EXPECT_NEAR(tp.value(y)(0, 0), lq.reduce(samples), 1e-14);
}

// --- grad_check itself ------------------------------------------------------------

TEST(GradCheckTool, LinearProgramIsExact)
{
    ParamStore ps;
    add_random(ps, "a", 3, 3, 1);
    const auto r = grad_check([](Tape& tp, ParamStore& p) { return probe(tp, tp.param(p.get("a"))); }, ps, 1e-4);
    EXPECT_LT(r.max_relative_error, 1e-10);
    EXPECT_EQ(r.checked, 9u);
}

TEST(GradCheckTool, DeadParametersReportedSeparately)
{
    ParamStore ps;
    add_random(ps, "used", 2, 2, 1);
    add_random(ps, "dead", 3, 1, 2);
    const auto r = grad_check([](Tape& tp, ParamStore& p) { return probe(tp, tp.param(p.get("used"))); }, ps);
    EXPECT_EQ(r.dead, 3u);
    EXPECT_EQ(r.checked, 4u);
    EXPECT_LT(r.max_relative_error, 1e-8);
}

TEST(GradCheckTool, DetectsWrongGradient)
{
    ParamStore ps;
    add_random(ps, "a", 2, 2, 1);
    const auto r = grad_check(
        [](Tape& tp, ParamStore& p) {
            Var a = tp.param(p.get("a"));
            Mat v = tp.value(a).array().square();
            // value a^2 but a deliberately wrong backward (claims slope 1)
            Var y = tp.record(std::move(v), {a}, [a](Tape& t, const Mat& g) { t.accumulate(a, g); }, "bad");
            return sum(tp, y);
        },
        ps);
    EXPECT_GT(r.max_relative_error, 1e-2);
}

TEST(GradCheckTool, EpsilonRange)
{
    ParamStore ps;
    add_random(ps, "a", 1, 1, 1);
    const Program prog = [](Tape& tp, ParamStore& p) { return sum(tp, tp.param(p.get("a"))); };
    EXPECT_THROW(grad_check(prog, ps, 1e-8), DomainError);
    EXPECT_THROW(grad_check(prog, ps, 1e-3), DomainError);
    EXPECT_NO_THROW(grad_check(prog, ps, 1e-7));
    EXPECT_NO_THROW(grad_check(prog, ps, 1e-4));
}

// --- Adam ---------------------------------------------------------------------------

TEST(Adam, ZeroGradientLeavesParameters)
{
    ParamStore ps;
    add_random(ps, "a", 3, 2, 1);
    const Mat before = ps.get("a").value;
    AdamState st;
    adam_step(ps, st, 1e-3);
    EXPECT_EQ(ps.get("a").value, before);
    EXPECT_EQ(st.step, 1);
}

TEST(Adam, FirstStepFormula)
{
    ParamStore ps;
    auto& p = ps.add("a", 1, 3);
    p.value << 1.0, -2.0, 0.5;
    p.grad << 0.3, -4.0, 1e-9;
    const Mat g = p.grad;
    const Mat before = p.value;
    AdamState st;
    const double lr = 0.01, b1 = 0.9, b2 = 0.999, eps = 1e-8;
    adam_step(ps, st, lr);
    for (int i = 0; i < 3; ++i) {
        const double m = (1 - b1) * g(0, i), v = (1 - b2) * g(0, i) * g(0, i);
        const double mh = m / (1 - b1), vh = v / (1 - b2);
        EXPECT_NEAR(p.value(0, i), before(0, i) - lr * mh / (std::sqrt(vh) + eps), 1e-15);
    }
    EXPECT_TRUE(p.grad.isZero(0.0));
}

TEST(Adam, ConstantGradientSteadyState)
{
    ParamStore ps;
    auto& p = ps.add("a", 1, 2);
    AdamState st;
    const double lr = 1e-3;
    Mat prev = p.value;
    for (int i = 0; i < 2000; ++i) {
        p.grad << 0.7, -3.0;
        adam_step(ps, st, lr);
        const Mat step = p.value - prev;
        prev = p.value;
        EXPECT_LT(step(0, 0), 0.0);
        EXPECT_GT(step(0, 1), 0.0);
        if (i == 1999) {
            EXPECT_NEAR(step(0, 0), -lr, 1e-9);
            EXPECT_NEAR(step(0, 1), lr, 1e-9);
        }
    }
}

// --- initialization ----------------------------------------------------------------

TEST(Init, GlorotBoundAndDeterminism)
{
    auto make = [](std::uint64_t seed) {
        ParamStore ps;
        auto& W = ps.add("W", 42, 42);
        CounterRng rng(seed, 1);
        glorot_uniform(W, rng);
        return W.value;
    };
    const Mat a = make(3), b = make(3), c = make(4);
    EXPECT_EQ(a, b);
    EXPECT_NE(a, c);
    const double bound = std::sqrt(6.0 / 84.0);
    EXPECT_LE(a.cwiseAbs().maxCoeff(), bound);
    EXPECT_GT(a.cwiseAbs().maxCoeff(), 0.95 * bound);
    EXPECT_NEAR(a.mean(), 0.0, 0.02);
}

// --- serialization -------------------------------------------------------------------

TEST(Serialize, RoundTripIsExact)
{
    const Mat m = random_mat(3, 5, 8);
    const Mat back = mat_from_json(nlohmann::json::parse(to_json(m).dump()));
    EXPECT_EQ(back, m);
    EXPECT_THROW(mat_from_json(nlohmann::json{{"shape", {2, 2}}, {"data", {1.0, 2.0}}}), ConfigError);
}

TEST(ParamStoreTest, NamesUniqueOrderStable)
{
    ParamStore ps;
    ps.add("z", 1, 1);
    ps.add("a", 2, 1);
    EXPECT_THROW(ps.add("z", 1, 1), Error);
    EXPECT_EQ(ps[0].name, "z");
    EXPECT_EQ(ps[1].name, "a");
    EXPECT_EQ(ps.scalar_count(), 3u);
    EXPECT_EQ(ps.get("a").grad.rows(), 2);
    EXPECT_THROW(ps.get("missing"), Error);
}
