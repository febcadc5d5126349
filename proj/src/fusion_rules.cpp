#include "afuse/fusion_rules.hpp"

#include <cstdio>
#include <sstream>

#include "afuse/blocks.hpp"
#include "afuse/errors.hpp"

namespace afuse {

std::string FusionRule::name() const {
  switch (kind) {
    case RuleKind::kMax:
      return "MAX";
    case RuleKind::kWeightedAverage: {
      if (gamma1 == 0.5 && gamma2 == 0.5) return "WA";
      std::ostringstream os;
      os << "WA(" << gamma1 << "," << gamma2 << ")";
      return os.str();
    }
    case RuleKind::kAdaptiveAverage:
      return "AA";
    case RuleKind::kSum:
      return "SUM";
    case RuleKind::kConcat:
      return "CC";
    case RuleKind::kDirect:
      return "DIRECT";
  }
  return "?";
}

FusionRule FusionRule::parse(std::string_view text) {
  FusionRule r;
  if (text == "MAX") {
    r.kind = RuleKind::kMax;
  } else if (text == "WA") {
    r.kind = RuleKind::kWeightedAverage;
  } else if (text.starts_with("WA(") && text.ends_with(")")) {
    r.kind = RuleKind::kWeightedAverage;
    const std::string inner(text.substr(3, text.size() - 4));
    char comma = 0;
    std::istringstream is(inner);
    if (!(is >> r.gamma1 >> comma >> r.gamma2) || comma != ',' || r.gamma1 < 0 || r.gamma2 < 0) {
      throw ValidationError("bad weighted-average rule '" + std::string(text) + "'");
    }
  } else if (text == "AA") {
    r.kind = RuleKind::kAdaptiveAverage;
  } else if (text == "SUM") {
    r.kind = RuleKind::kSum;
  } else if (text == "CC") {
    r.kind = RuleKind::kConcat;
  } else if (text == "DIRECT" || text == "DC") {
    r.kind = RuleKind::kDirect;
  } else {
    throw ValidationError("unknown fusion rule '" + std::string(text) + "'");
  }
  return r;
}

void declare_rule(ParamSpecMap& spec, const FusionRule& rule, int channels, const std::string& prefix) {
  if (rule.kind == RuleKind::kAdaptiveAverage) {
    declare_conv(spec, prefix + "/mask", 4, 1, 7);
  } else if (rule.kind == RuleKind::kDirect) {
    declare_conv(spec, prefix + "/direct", 2, channels, 3);
  }
}

template <typename S>
std::pair<Var<S>, Var<S>> adaptive_masks(Tape<S>& tape, const std::string& prefix, Var<S> e_ir, Var<S> e_vis) {
  auto pooled = ops::concat(
      {ops::channel_mean(e_ir), ops::channel_max(e_ir), ops::channel_mean(e_vis), ops::channel_max(e_vis)});
  auto m_ir = ops::sigmoid(conv(tape, prefix + "/mask", pooled));
  auto m_vis = ops::affine(m_ir, -1.0, 1.0);
  return {m_ir, m_vis};
}

template <typename S>
Var<S> apply_rule(Tape<S>& tape, const FusionRule& rule, const std::string& prefix, Var<S> e_ir, Var<S> e_vis) {
  if (e_ir.shape() != e_vis.shape()) {
    throw ValidationError("fusion rule " + rule.name() + ": shapes " + to_string(e_ir.shape()) + " and " +
                          to_string(e_vis.shape()) + " differ");
  }
  switch (rule.kind) {
    case RuleKind::kMax:
      return ops::maximum(e_ir, e_vis);
    case RuleKind::kWeightedAverage:
      return ops::affine(e_ir, rule.gamma1, 0.0) + ops::affine(e_vis, rule.gamma2, 0.0);
    case RuleKind::kAdaptiveAverage: {
      auto [m_ir, m_vis] = adaptive_masks(tape, prefix, e_ir, e_vis);
      return e_ir * m_ir + e_vis * m_vis;
    }
    case RuleKind::kSum:
      return e_ir + e_vis;
    case RuleKind::kConcat:
      return ops::concat({e_ir, e_vis});
    case RuleKind::kDirect:
      return ops::relu(conv(tape, prefix + "/direct", ops::concat({e_ir, e_vis})));
  }
  throw ValidationError("unknown fusion rule");
}

template std::pair<Var<float>, Var<float>> adaptive_masks(Tape<float>&, const std::string&, Var<float>, Var<float>);
template std::pair<Var<double>, Var<double>> adaptive_masks(Tape<double>&, const std::string&, Var<double>,
                                                             Var<double>);
template Var<float> apply_rule(Tape<float>&, const FusionRule&, const std::string&, Var<float>, Var<float>);
template Var<double> apply_rule(Tape<double>&, const FusionRule&, const std::string&, Var<double>, Var<double>);

}  // namespace afuse
