#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <random>

#include "afuse/errors.hpp"
#include "afuse/fusion_net.hpp"
#include "afuse/gradcheck.hpp"
#include "afuse/random.hpp"

using namespace afuse;

namespace {

template <typename S = double>
Tensor<S> random_tensor(const Shape& s, std::uint64_t seed, double lo = -1, double hi = 1) {
  Rng rng(seed);
  std::uniform_real_distribution<double> u(lo, hi);
  Tensor<S> t(s);
  for (std::size_t i = 0; i < t.size(); ++i) t[i] = static_cast<S>(u(rng));
  return t;
}

std::size_t conv_count(int in, int out, int k) { return static_cast<std::size_t>(in * out * k * k + out); }

/// Parameter counts from the block definitions, written out independently.
std::size_t block_count(const std::string& code, int in, int out) {
  const int k = code[0] == '7' ? 7 : code[0] == '5' ? 5 : 3;
  const auto family = code.substr(code.find('-') + 1);
  const std::size_t proj = in != out ? conv_count(in, out, 1) : 0;
  if (code == "CA") {
    const int hidden = std::max(1, out / 4);
    return proj + conv_count(out, hidden, 1) + conv_count(hidden, out, 1);
  }
  if (code == "SA") return proj + conv_count(2, 1, 7);
  if (family == "C" || family == "DC") return conv_count(in, out, k);
  if (family == "RB") return conv_count(in, out, k) + conv_count(out, out, k) + proj;
  if (family == "DB") {
    const int g = std::max(1, out / 2);
    return conv_count(in, g, k) + conv_count(in + g, g, k) + conv_count(in + 2 * g, g, k) + conv_count(in + 3 * g, out, 1);
  }
  throw std::logic_error("no count for " + code);
}

Tensor<double> brute_force_residual(const Tensor<double>& f) {
  const int B = f.dim(0), C = f.dim(1), H = f.dim(2), W = f.dim(3);
  Tensor<double> out({B, 1, H, W});
  for (int n = 0; n < B; ++n) {
    for (int h = 0; h < H; ++h) {
      for (int w = 0; w < W; ++w) {
        double lo = f.at(n, 0, h, w), hi = lo;
        for (int c = 1; c < C; ++c) {
          lo = std::min(lo, f.at(n, c, h, w));
          hi = std::max(hi, f.at(n, c, h, w));
        }
        out.at(n, 0, h, w) = hi - lo;
      }
    }
  }
  return out;
}

}  // namespace

TEST_CASE("residual feature: constant channels give zero, (1,3,2) gives 2") {
  Tape<double> tape;
  CHECK(residual_feature(tape.constant(Tensor<double>({2, 4, 3, 3}, 0.3))).value() == Tensor<double>({2, 1, 3, 3}));
  CHECK(residual_feature(tape.constant(Tensor<double>({1, 3, 1, 1}, {1.0, 3.0, 2.0}))).value().item() == 2.0);
}

TEST_CASE("residual feature equals the brute-force channel range exactly") {
  for (int seed = 0; seed < 20; ++seed) {
    const auto f = random_tensor({2, 8, 5, 5}, 500 + seed, -3, 3);
    Tape<double> tape;
    const auto r = residual_feature(tape.constant(f)).value();
    CHECK(r == brute_force_residual(f));
    for (std::size_t i = 0; i < r.size(); ++i) CHECK(r[i] >= 0.0);
  }
}

TEST_CASE("decompose: zero residual and b = 0 splits the features in half") {
  Tape<double> tape;
  const auto e = random_tensor({1, 3, 4, 4}, 1);
  auto d = decompose(tape.constant(e), tape.constant(Tensor<double>({1, 1, 4, 4})), tape.scalar(2.0), tape.scalar(0.0));
  for (std::size_t i = 0; i < e.size(); ++i) {
    CHECK(d.low.value()[i] == doctest::Approx(e[i] / 2));
    CHECK(d.high.value()[i] == doctest::Approx(e[i] / 2));
  }
  for (std::size_t i = 0; i < d.gate.value().size(); ++i) CHECK(d.gate.value()[i] == 0.5);
}

TEST_CASE("decompose reconstructs the features and routes larger residuals to the high branch") {
  for (int seed = 0; seed < 10; ++seed) {
    Tape<double> tape;
    const auto e = random_tensor({2, 4, 6, 6}, 10 + seed);
    const auto res = random_tensor({2, 1, 6, 6}, 30 + seed, 0, 2);
    auto d = decompose(tape.constant(e), tape.constant(res), tape.scalar(1.5), tape.scalar(0.7));
    for (std::size_t i = 0; i < e.size(); ++i) CHECK(std::abs(d.low.value()[i] + d.high.value()[i] - e[i]) <= 1e-6);
    // within one image the gate is a monotone function of the residual
    const auto& g = d.gate.value();
    for (int n = 0; n < 2; ++n) {
      for (int p = 0; p < 36; ++p) {
        for (int q = 0; q < 36; ++q) {
          const double rp = res[static_cast<std::size_t>(n * 36 + p)], rq = res[static_cast<std::size_t>(n * 36 + q)];
          if (rp > rq) CHECK(g[static_cast<std::size_t>(n * 36 + p)] > g[static_cast<std::size_t>(n * 36 + q)]);
        }
      }
    }
  }
}

TEST_CASE("fusion rules on hand values") {
  Tape<double> tape;
  const auto e_ir = Tensor<double>({1, 1, 1, 2}, {2.0, 4.0});
  const auto e_vis = Tensor<double>({1, 1, 1, 2}, {4.0, 8.0});
  auto ir = tape.constant(e_ir);
  auto vis = tape.constant(e_vis);

  SUBCASE("weighted average") {
    auto out = apply_rule(tape, FusionRule::parse("WA"), "r", ir, vis).value();
    CHECK(out == Tensor<double>({1, 1, 1, 2}, {3.0, 6.0}));
    auto skew = apply_rule(tape, FusionRule::parse("WA(0.25,0.75)"), "r", ir, vis).value();
    CHECK(skew == Tensor<double>({1, 1, 1, 2}, {3.5, 7.0}));
  }
  SUBCASE("sum with a zero operand") {
    CHECK(apply_rule(tape, FusionRule::parse("SUM"), "r", ir, tape.constant(Tensor<double>({1, 1, 1, 2}))).value() == e_ir);
  }
  SUBCASE("max under dominance and idempotence") {
    CHECK(apply_rule(tape, FusionRule::parse("MAX"), "r", ir, vis).value() == e_vis);
    CHECK(apply_rule(tape, FusionRule::parse("MAX"), "r", ir, ir).value() == e_ir);
  }
  SUBCASE("concatenation doubles the channels") {
    CHECK(apply_rule(tape, FusionRule::parse("CC"), "r", ir, vis).shape() == Shape{1, 2, 1, 2});
  }
  SUBCASE("mismatched shapes are rejected") {
    auto wide = tape.constant(Tensor<double>({1, 2, 1, 2}));
    CHECK_THROWS_AS(apply_rule(tape, FusionRule::parse("SUM"), "r", ir, wide), ValidationError);
  }
  CHECK_THROWS_AS(FusionRule::parse("MEDIAN"), ValidationError);
}

TEST_CASE("SUM and WA are linear in each argument") {
  for (const char* r : {"SUM", "WA", "WA(0.3,1.2)"}) {
    const auto rule = FusionRule::parse(r);
    const auto a1 = random_tensor({1, 3, 4, 4}, 1), a2 = random_tensor({1, 3, 4, 4}, 2);
    const auto b = random_tensor({1, 3, 4, 4}, 3);
    const double s = 1.7;
    Tape<double> tape;
    Tensor<double> mix = a1;
    mix.array() = s * a1.array() + a2.array();
    auto lhs = apply_rule(tape, rule, "r", tape.constant(mix), tape.constant(b)).value();
    auto f1 = apply_rule(tape, rule, "r", tape.constant(a1), tape.constant(b)).value();
    auto f2 = apply_rule(tape, rule, "r", tape.constant(a2), tape.constant(b)).value();
    auto f0 = apply_rule(tape, rule, "r", tape.constant(Tensor<double>({1, 3, 4, 4})), tape.constant(b)).value();
    for (std::size_t i = 0; i < lhs.size(); ++i) {
      // affine in the first argument: f(s a1 + a2) = s f(a1) + f(a2) - s f(0)
      CHECK(lhs[i] == doctest::Approx(s * f1[i] + f2[i] - s * f0[i]).epsilon(1e-12));
    }
  }
}

TEST_CASE("adaptive-average masks are complementary and bounded") {
  ParamSpecMap spec;
  declare_rule(spec, FusionRule::parse("AA"), 4, "rule");
  const auto params = init_parameters<double>(spec, 5);
  Tape<double> tape(params);
  auto [m_ir, m_vis] = adaptive_masks(tape, "rule", tape.constant(random_tensor({2, 4, 6, 6}, 6)),
                                      tape.constant(random_tensor({2, 4, 6, 6}, 7)));
  for (std::size_t i = 0; i < m_ir.value().size(); ++i) {
    CHECK(std::abs(m_ir.value()[i] + m_vis.value()[i] - 1.0) <= 1e-6);
    CHECK(m_ir.value()[i] >= 0.0);
    CHECK(m_ir.value()[i] <= 1.0);
  }
}

TEST_CASE("residual block with zero weights is the identity") {
  const Block b = build_block(OpCode::parse("3-RB"), 4, 4, "rb");
  ParamSpecMap spec;
  b.declare(spec);
  ParameterStore<double> zeros;
  for (const auto& [name, ps] : spec) zeros.set(name, Tensor<double>(ps.shape));
  Tape<double> tape(zeros);
  const auto x = random_tensor({2, 4, 5, 5}, 8);
  CHECK(b.forward(tape, tape.constant(x)).value() == x);
}

TEST_CASE("channel attention with a saturated bottleneck is close to the identity") {
  const Block b = build_block(OpCode::parse("CA"), 8, 8, "ca");
  ParamSpecMap spec;
  b.declare(spec);
  auto params = init_parameters<double>(spec, 9);
  params.set("ca/fc2/w", Tensor<double>(spec.at("ca/fc2/w").shape));
  params.set("ca/fc2/b", Tensor<double>({8}, 40.0));
  Tape<double> tape(params);
  const auto x = random_tensor({1, 8, 4, 4}, 10);
  const auto out = b.forward(tape, tape.constant(x)).value();
  CHECK(max_abs_diff(out, x) <= 1e-12);
}

TEST_CASE("block parameter counts follow the construction formulas") {
  for (const char* code : {"3-C", "5-DC", "3-RB", "7-RB", "3-DB", "5-DB", "SA", "CA"}) {
    for (auto [in, out] : {std::pair{8, 8}, std::pair{16, 8}, std::pair{6, 12}}) {
      INFO(code << " " << in << "->" << out);
      CHECK(build_block(OpCode::parse(code), in, out, "b").parameter_count() == block_count(code, in, out));
    }
  }
  CHECK_THROWS_AS(OpCode::parse("3-XX"), ValidationError);
  CHECK_THROWS_AS(OpCode::parse("4-C"), ValidationError);
  CHECK_THROWS_AS(OpCode::parse("DC"), ValidationError);
  CHECK_THROWS_AS(build_block(OpCode::parse("3-C"), 0, 4, "b"), ValidationError);
}

TEST_CASE("spatial attention scales features by a one-channel sigmoid mask") {
  const Block b = build_block(OpCode::parse("SA"), 3, 3, "sa");
  ParamSpecMap spec;
  b.declare(spec);
  const auto params = init_parameters<double>(spec, 11);
  Tape<double> tape(params);
  const auto x = random_tensor({1, 3, 5, 5}, 12, 0.1, 1.0);
  const auto out = b.forward(tape, tape.constant(x)).value();
  for (int h = 0; h < 5; ++h) {
    for (int w = 0; w < 5; ++w) {
      const double ratio = out.at(0, 0, h, w) / x.at(0, 0, h, w);
      CHECK(ratio > 0.0);
      CHECK(ratio < 1.0);
      for (int c = 1; c < 3; ++c) CHECK(out.at(0, c, h, w) / x.at(0, c, h, w) == doctest::Approx(ratio));
    }
  }
}

TEST_CASE("parameter count of the searched architecture at 16 channels") {
  const ArchSpec spec = ArchSpec::searched_reference(16);
  CHECK(spec.to_string() == "3-DB,3-DC,3-DB,3-DB,CA,7-RB|AA|16");
  const FusionNetwork net(spec);
  std::size_t expected = 2 * (conv_count(1, 16, 3) + 2);  // stems and decomposition scalars
  for (const auto& op : spec.slots) expected += block_count(op.name(), 16, 16);
  expected += conv_count(4, 1, 7);   // adaptive-average mask
  expected += conv_count(16, 1, 3);  // head
  CHECK(expected == 45846);
  std::size_t counted = 0;
  for (const auto& [name, ps] : net.parameter_specs()) counted += numel(ps.shape);
  CHECK(counted == expected);
}

TEST_CASE("fusion network output is a [0,1] image of the input size for every rule") {
  for (const char* rule : {"MAX", "WA", "AA", "SUM", "CC", "DIRECT"}) {
    INFO(rule);
    const ArchSpec spec = ArchSpec::uniform(OpCode::parse("3-RB"), FusionRule::parse(rule), 4);
    const FusionNetwork net(spec);
    const auto params = init_parameters<float>(net.parameter_specs(), 13);
    Tape<float> tape(params);
    const auto x = random_tensor<float>({2, 1, 9, 7}, 14, 0, 1);
    const auto u = net.forward(tape, tape.constant(x), tape.constant(x)).u.value();
    CHECK(u.shape() == Shape{2, 1, 9, 7});
    CHECK(u.all_finite());
    for (std::size_t i = 0; i < u.size(); ++i) {
      CHECK(u[i] >= 0.0f);
      CHECK(u[i] <= 1.0f);
    }
  }
}

TEST_CASE("every rule's network passes the finite-difference check") {
  for (const char* rule : {"MAX", "WA", "AA", "SUM", "CC", "DIRECT"}) {
    INFO(rule);
    const FusionNetwork net(ArchSpec::uniform(OpCode::parse("3-C"), FusionRule::parse(rule), 3));
    const auto params = init_parameters<double>(net.parameter_specs(), 15);
    const auto x = random_tensor({1, 1, 6, 6}, 16, 0.05, 0.95);
    const auto y = random_tensor({1, 1, 6, 6}, 17, 0.05, 0.95);
    const ParamScalarFn f = [&](Tape<double>& tape) {
      return ops::mean(ops::square(net.forward(tape, tape.constant(x), tape.constant(y)).u));
    };
    CHECK(finite_difference_check(f, params, 30, 18, 1e-6) <= 1e-4);
  }
}

TEST_CASE("architecture strings round-trip") {
  const ArchSpec a = ArchSpec::searched_reference(8);
  CHECK(ArchSpec::parse(a.to_string()) == a);
  CHECK_THROWS_AS(ArchSpec::parse("3-DB,3-DC|AA|8"), ValidationError);
}
