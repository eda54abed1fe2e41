#include <gtest/gtest.h>

#include <cmath>

#include "dints/grad_check.hpp"
#include "dints/ops.hpp"
#include "test_util.hpp"

using namespace dints;
using ad::Tape;
using ad::Var;

TEST(Tensor, ShapeAndAccess)
{
    Tensor t({2, 3}, 1.5);
    EXPECT_EQ(t.size(), 6u);
    EXPECT_EQ(t.rank(), 2);
    t.at(1, 2) = 4.0;
    EXPECT_DOUBLE_EQ(t.data[5], 4.0);
    EXPECT_EQ(t.row(1).size(), 3u);
    EXPECT_EQ(shape_str({2, 3, 4}), "[2,3,4]");
    EXPECT_THROW(Tensor({2, 2}, std::vector<double>{1, 2, 3}), ShapeError);
    EXPECT_THROW(Tensor({-1}), ShapeError);
    EXPECT_THROW(t.item(), ShapeError);
    EXPECT_DOUBLE_EQ(Tensor::scalar(3.0).item(), 3.0);
}

TEST(Tape, HandDerivedGradient)
{
    // f(x, y) = sum(x * y + x)  ->  df/dx = y + 1, df/dy = x
    Tape tape;
    const Var x = tape.param(Tensor({3}, std::vector<double>{1, 2, 3}));
    const Var y = tape.param(Tensor({3}, std::vector<double>{4, 5, 6}));
    const Var f = ad::sum(ad::add(ad::mul(x, y), x));
    EXPECT_DOUBLE_EQ(f.value().item(), 4 + 10 + 18 + 6);
    tape.backward(f);
    EXPECT_EQ(tape.grad(x).data, (std::vector<double>{5, 6, 7}));
    EXPECT_EQ(tape.grad(y).data, (std::vector<double>{1, 2, 3}));
}

TEST(Tape, ConstantsReceiveNoGradient)
{
    Tape tape;
    const Var c = tape.constant(Tensor({2}, 2.0));
    const Var p = tape.param(Tensor({2}, 3.0));
    const Var f = ad::sum(ad::mul(c, p));
    EXPECT_FALSE(tape.requires_grad(c));
    EXPECT_TRUE(tape.requires_grad(f));
    tape.backward(f);
    EXPECT_EQ(tape.grad(c).data, (std::vector<double>{0, 0}));
    EXPECT_EQ(tape.grad(p).data, (std::vector<double>{2, 2}));
}

TEST(Tape, ReusedVariableAccumulates)
{
    Tape tape;
    const Var x = tape.param(Tensor::scalar(3.0));
    const Var f = ad::mul(x, x); // x^2
    tape.backward(f);
    EXPECT_DOUBLE_EQ(tape.grad(x).item(), 6.0);
}

TEST(Tape, Errors)
{
    Tape a, b;
    const Var x = a.param(Tensor({2}, 1.0));
    const Var y = b.param(Tensor({2}, 1.0));
    EXPECT_THROW(ad::add(x, y), ValidationError);
    EXPECT_THROW(a.backward(x), ShapeError);
    EXPECT_THROW(b.value(x), ValidationError);
    EXPECT_THROW(ad::add(x, a.param(Tensor({3}, 1.0))), ShapeError);
}

namespace {

ad::GradCheckReport check(const ad::ScalarFn& f, const std::vector<Tensor>& in)
{
    ad::GradCheckOptions opt;
    opt.tol = 1e-6;
    return ad::grad_check(f, in, opt);
}

// Weighted sum with fixed pseudo-random weights, so every output element matters.
Var probe(Tape& t, Var y)
{
    Tensor w(y.shape(), 0.0);
    for (std::size_t k = 0; k < w.size(); ++k) w.data[k] = std::sin(1.0 + 0.7 * static_cast<double>(k));
    return ad::sum(ad::mul(y, t.constant(w)));
}

} // namespace

TEST(GradCheck, ElementwiseOps)
{
    std::mt19937_64 rng(1);
    const Tensor a = testutil::random_tensor({2, 3}, rng), b = testutil::random_tensor({2, 3}, rng);
    EXPECT_TRUE(check([](Tape& t, std::span<const Var> v) { return probe(t, ad::add(v[0], v[1])); }, {a, b}).passed);
    EXPECT_TRUE(check([](Tape& t, std::span<const Var> v) { return probe(t, ad::sub(v[0], v[1])); }, {a, b}).passed);
    EXPECT_TRUE(check([](Tape& t, std::span<const Var> v) { return probe(t, ad::mul(v[0], v[1])); }, {a, b}).passed);
    EXPECT_TRUE(check([](Tape& t, std::span<const Var> v) { return probe(t, ad::affine(v[0], -2.5, 0.3)); }, {a}).passed);
    EXPECT_TRUE(check([](Tape& t, std::span<const Var> v) { return probe(t, ad::scale_by(v[0], v[1])); },
                      {a, Tensor::scalar(0.7)})
                    .passed);
    EXPECT_TRUE(check([](Tape& t, std::span<const Var> v) { return probe(t, ad::sigmoid(v[0], 1e-12)); }, {a}).passed);
    EXPECT_TRUE(check([](Tape& t, std::span<const Var> v) { return probe(t, ad::log(v[0], 1e-12)); },
                      {testutil::random_tensor({2, 3}, rng, 0.1, 2.0)})
                    .passed);
    // Away from the kinks.
    const Tensor off_kink({4}, std::vector<double>{-1.3, -0.4, 0.5, 2.0});
    EXPECT_TRUE(check([](Tape& t, std::span<const Var> v) { return probe(t, ad::abs(v[0])); }, {off_kink}).passed);
    EXPECT_TRUE(check([](Tape& t, std::span<const Var> v) { return probe(t, ad::relu(v[0])); }, {off_kink}).passed);
}

TEST(GradCheck, StructuralOps)
{
    std::mt19937_64 rng(2);
    const Tensor a = testutil::random_tensor({3, 4}, rng), b = testutil::random_tensor({4, 2}, rng);
    EXPECT_TRUE(check([](Tape& t, std::span<const Var> v) { return probe(t, ad::matmul(v[0], v[1])); }, {a, b}).passed);
    EXPECT_TRUE(check([](Tape&, std::span<const Var> v) { return ad::mean(ad::mul(v[0], v[0])); }, {a}).passed);
    EXPECT_TRUE(check([](Tape&, std::span<const Var> v) { return ad::at(v[0], 5); }, {a}).passed);
    EXPECT_TRUE(check([](Tape& t, std::span<const Var> v) { return probe(t, ad::reshape(v[0], {2, 6})); }, {a}).passed);
    EXPECT_TRUE(check([](Tape& t, std::span<const Var> v) { return probe(t, ad::rows(v[0], 1, 3)); }, {a}).passed);
    const Tensor c = testutil::random_tensor({2, 3, 4}, rng, -2.0, 2.0);
    EXPECT_TRUE(check([](Tape& t, std::span<const Var> v) { return probe(t, ad::softmax(v[0], -1)); }, {c}).passed);
    EXPECT_TRUE(check([](Tape& t, std::span<const Var> v) { return probe(t, ad::softmax(v[0], 1)); }, {c}).passed);
    EXPECT_TRUE(check([](Tape& t, std::span<const Var> v) { return probe(t, ad::softmax(v[0], 0)); }, {c}).passed);
}

TEST(Ops, SoftmaxRowsSumToOne)
{
    Tape tape;
    const Var x = tape.constant(Tensor({2, 3}, std::vector<double>{1000, 1001, 1002, -5, 0, 5}));
    const Tensor s = ad::softmax(x).value();
    EXPECT_NEAR(s.at(0, 0) + s.at(0, 1) + s.at(0, 2), 1.0, 1e-15);
    EXPECT_NEAR(s.at(1, 0) + s.at(1, 1) + s.at(1, 2), 1.0, 1e-15);
    EXPECT_TRUE(s.all_finite());
}

TEST(Ops, ClampsAndKinks)
{
    Tape tape;
    const Var x = tape.param(Tensor({3}, std::vector<double>{-100.0, 0.0, 100.0}));
    const Var s = ad::sigmoid(x, 1e-12);
    EXPECT_DOUBLE_EQ(s.value().data[0], 1e-12);
    EXPECT_DOUBLE_EQ(s.value().data[2], 1.0 - 1e-12);
    tape.backward(ad::sum(s));
    EXPECT_EQ(tape.grad(x).data[0], 0.0);
    EXPECT_DOUBLE_EQ(tape.grad(x).data[1], 0.25);
    EXPECT_EQ(tape.grad(x).data[2], 0.0);

    Tape t2;
    const Var z = t2.param(Tensor({2}, std::vector<double>{0.0, -1.0}));
    t2.backward(ad::sum(ad::abs(z)));
    EXPECT_EQ(t2.grad(z).data[0], 0.0);
    EXPECT_EQ(t2.grad(z).data[1], -1.0);

    Tape t3;
    const Var l = t3.param(Tensor({2}, std::vector<double>{0.0, 1.0}));
    const Var lv = ad::log(l, 1e-12);
    EXPECT_NEAR(lv.value().data[0], std::log(1e-12), 1e-12);
    t3.backward(ad::sum(lv));
    EXPECT_EQ(t3.grad(l).data[0], 0.0);
    EXPECT_DOUBLE_EQ(t3.grad(l).data[1], 1.0);
}

TEST(GradCheck, DetectsWrongGradient)
{
    // A primitive with a deliberately wrong adjoint must be caught.
    const ad::ScalarFn bad = [](Tape& t, std::span<const Var> v) {
        const Var x = v[0];
        Tensor out = x.value();
        for (double& e : out.data) e = e * e;
        const Var y = t.record(std::move(out), {x}, [x](Tape& tp, const Tensor&, const Tensor& g) {
            if (Tensor* gx = tp.grad_sink(x))
                for (std::size_t k = 0; k < g.size(); ++k) gx->data[k] += g.data[k] * x.value().data[k]; // should be 2x
        });
        return ad::sum(y);
    };
    EXPECT_FALSE(ad::grad_check(bad, {Tensor({2}, std::vector<double>{1.0, -2.0})}).passed);
}
