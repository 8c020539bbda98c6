#include "skattn/gradient_suite.hpp"

#include <functional>
#include <random>

#include "skattn/adapter.hpp"
#include "skattn/attention.hpp"
#include "skattn/diffusion.hpp"
#include "skattn/grad_check.hpp"
#include "skattn/ops.hpp"

namespace skattn {

namespace {

Tensor random(Shape shape, std::mt19937_64& rng, bool requires_grad = true) {
  std::uniform_real_distribution<double> dist(-1.0, 1.0);
  std::vector<double> v(shape_numel(shape));
  for (double& x : v) x = dist(rng);
  return Tensor::create(std::move(shape), std::move(v), requires_grad);
}

struct Suite {
  std::mt19937_64 rng;
  double h, tol;
  std::vector<GradientCase> cases;

  void check(const std::string& op, const std::string& shape,
             const std::function<Tensor(const std::vector<Tensor>&)>& f, const NamedTensors& inputs) {
    std::vector<Tensor> args;
    for (const auto& in : inputs) args.push_back(in.second);
    std::mt19937_64 probe_rng(rng());
    const Tensor first = f(args);
    const Tensor weights = random(first.shape(), probe_rng, false);
    const auto report = grad_check([&] { return ops::sum(ops::mul(f(args), weights)); }, inputs, h, tol);
    cases.push_back({op, shape, report.max_rel_error(), report.passed()});
  }
};

std::string dims(std::initializer_list<int> d) {
  std::string s;
  for (int x : d) s += (s.empty() ? "" : "x") + std::to_string(x);
  return s;
}

}  // namespace

std::vector<GradientCase> run_gradient_suite(int shapes_per_op, std::uint64_t seed, double h,
                                             double tol) {
  Suite s{std::mt19937_64(seed), h, tol, {}};
  auto& rng = s.rng;
  std::uniform_int_distribution<int> ext(1, 5);
  for (int k = 0; k < shapes_per_op; ++k) {
    const int c = ext(rng), hh = ext(rng), w = ext(rng);
    const std::string shp = dims({c, hh, w});
    Tensor x = random({c, hh, w}, rng), y = random({c, hh, w}, rng);
    using V = const std::vector<Tensor>&;
    s.check("add", shp, [](V a) { return ops::add(a[0], a[1]); }, {{"x", x}, {"y", y}});
    s.check("sub", shp, [](V a) { return ops::sub(a[0], a[1]); }, {{"x", x}, {"y", y}});
    s.check("mul", shp, [](V a) { return ops::mul(a[0], a[1]); }, {{"x", x}, {"y", y}});
    s.check("scale", shp, [](V a) { return ops::scale(a[0], -1.7); }, {{"x", x}});
    s.check("silu", shp, [](V a) { return ops::silu(a[0]); }, {{"x", x}});
    s.check("sum", shp, [](V a) { return ops::sum(ops::mul(a[0], a[0])); }, {{"x", x}});
    s.check("mean", shp, [](V a) { return ops::mean(ops::mul(a[0], a[0])); }, {{"x", x}});
    const int axis = k % 3;
    s.check("softmax", shp, [axis](V a) { return ops::softmax(a[0], axis); }, {{"x", x}});
    s.check("reshape", shp, [=](V a) { return ops::reshape(a[0], {hh, c * w}); }, {{"x", x}});
    s.check("permute", shp, [](V a) { return ops::permute(a[0], {2, 0, 1}); }, {{"x", x}});
    s.check("concat", shp, [axis](V a) { return ops::concat({a[0], a[1], a[0]}, axis); },
            {{"x", x}, {"y", y}});
    const int extent = x.dim(axis);
    s.check("slice", shp,
            [=](V a) { return ops::slice(a[0], axis, extent > 1 ? 1 : 0, extent); }, {{"x", x}});
    s.check("upsample2x", shp, [](V a) { return ops::upsample2x(a[0]); }, {{"x", x}});

    Tensor gamma = random({w}, rng), beta = random({w}, rng);
    s.check("layer_norm", shp, [](V a) { return ops::layer_norm(a[0], a[1], a[2]); },
            {{"x", x}, {"gamma", gamma}, {"beta", beta}});
    const int groups = c % 2 == 0 ? 2 : 1;
    Tensor gg = random({c}, rng), gb = random({c}, rng);
    s.check("group_norm", shp, [groups](V a) { return ops::group_norm(a[0], groups, a[1], a[2]); },
            {{"x", x}, {"gamma", gg}, {"beta", gb}});
    const int co = ext(rng);
    Tensor b = random({co}, rng), bc = random({c}, rng);
    Tensor w1 = random({co, c}, rng), w3 = random({co, c, 3, 3}, rng);
    s.check("add_channel_bias", shp, [](V a) { return ops::add_channel_bias(a[0], a[1]); },
            {{"x", x}, {"b", bc}});
    s.check("conv1x1", shp, [](V a) { return ops::conv1x1(a[0], a[1], a[2]); },
            {{"x", x}, {"w", w1}, {"b", b}});
    s.check("conv3x3", shp, [](V a) { return ops::conv3x3(a[0], a[1], a[2], 1); },
            {{"x", x}, {"w", w3}, {"b", b}});
    s.check("conv3x3_stride2", shp, [](V a) { return ops::conv3x3(a[0], a[1], a[2], 2); },
            {{"x", x}, {"w", w3}, {"b", b}});

    Tensor m = random({hh, w}, rng), r = random({w, c}, rng), lb = random({c}, rng);
    const std::string mshape = dims({hh, w, c});
    s.check("matmul", mshape, [](V a) { return ops::matmul(a[0], a[1]); }, {{"a", m}, {"b", r}});
    s.check("linear", mshape, [](V a) { return ops::linear(a[0], a[1], a[2]); },
            {{"x", m}, {"w", r}, {"b", lb}});

    const int n = ext(rng), mk = ext(rng), d = ext(rng);
    Tensor q = random({c, n, d}, rng), kk = random({c, mk, d}, rng), v = random({c, mk, d}, rng);
    s.check("scaled_dot_attention", dims({c, n, mk, d}),
            [](V a) { return ops::scaled_dot_attention(a[0], a[1], a[2]); },
            {{"q", q}, {"k", kk}, {"v", v}});

    Tensor z = random({c, hh, w}, rng, false);
    Tensor mask = Tensor::create({1, hh, w}, std::vector<double>(static_cast<std::size_t>(hh) * w, 1.0));
    const double t = 1000.0 * k / std::max(1, shapes_per_op);
    s.check("weighted_loss", shp, [&, t](V a) { return weighted_loss(z, a[0], mask, t, 1e-8).total; },
            {{"z_hat", y}});

    // Knitted attention on [D, H, W] maps; D divisible by the head count.
    const int heads = 1 + k % 2;
    const int dm = heads * ext(rng), dc = ext(rng), len = ext(rng);
    const std::string ashape = dims({dm, hh, w}) + " L" + std::to_string(len) + " h" + std::to_string(heads);
    std::mt19937_64 prng(rng());
    auto cross = AttentionParams::init(dm, dc, heads, prng);
    cross.set_positional_encoding(k % 2 == 0);
    Tensor map = random({dm, hh, w}, rng), seq = random({len, dc}, rng);
    NamedTensors cross_in{{"map", map}, {"seq", seq}};
    for (const auto& p : cross.named("p")) cross_in.push_back(p);
    s.check("sk_cross_attention", ashape,
            [&](V a) { return sk_cross_attention(FeatureMap2D(a[0]), TokenSequence(a[1]), cross).tensor(); },
            cross_in);

    auto self = AttentionParams::init(dm, dm, heads, prng);
    self.set_positional_encoding(k % 2 == 1);
    Tensor ref = random({dm, hh, w}, rng);
    NamedTensors ref_in{{"map", map}, {"ref", ref}};
    for (const auto& p : self.named("p")) ref_in.push_back(p);
    s.check("sk_reference_attention", dims({dm, hh, w}) + " h" + std::to_string(heads),
            [&](V a) { return sk_reference_attention(FeatureMap2D(a[0]), FeatureMap2D(a[1]), self).tensor(); },
            ref_in);
  }
  return s.cases;
}

}  // namespace skattn
