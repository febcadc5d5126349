#include "afuse/fusion_net.hpp"

#include <sstream>

#include "afuse/errors.hpp"

namespace afuse {

namespace {

std::string slot_prefix(const std::string& prefix, int slot) { return prefix + "/slot" + std::to_string(slot); }

}  // namespace

FusionNetwork::FusionNetwork(const ArchSpec& spec, std::string prefix)
    : arch_(spec), rule_(spec.rule), channels_(spec.base_channels), prefix_(std::move(prefix)) {
  build_slots();
}

FusionNetwork::FusionNetwork(std::vector<OpCode> candidates, FusionRule rule, int base_channels, std::string prefix)
    : relaxed_(true), candidates_(std::move(candidates)), rule_(rule), channels_(base_channels),
      prefix_(std::move(prefix)) {
  if (candidates_.empty()) throw ValidationError("supernet needs at least one candidate operation");
  arch_.rule = rule_;
  arch_.base_channels = channels_;
  arch_.slots.fill(candidates_.front());
  build_slots();
}

int FusionNetwork::slot_in_channels(int slot) const {
  return slot == static_cast<int>(SlotRole::kPostFusion1) ? rule_.fused_channels(channels_) : channels_;
}

void FusionNetwork::build_slots() {
  if (channels_ <= 0) throw ValidationError("base_channels must be positive");
  for (int s = 0; s < kNumSlots; ++s) {
    auto& blocks = slots_[static_cast<std::size_t>(s)];
    if (relaxed_) {
      for (std::size_t c = 0; c < candidates_.size(); ++c) {
        blocks.push_back(build_block(candidates_[c], slot_in_channels(s), channels_,
                                     slot_prefix(prefix_, s) + "/c" + std::to_string(c)));
      }
    } else {
      blocks.push_back(
          build_block(arch_.slots[static_cast<std::size_t>(s)], slot_in_channels(s), channels_, slot_prefix(prefix_, s)));
    }
  }
}

ParamSpecMap FusionNetwork::parameter_specs() const {
  ParamSpecMap spec;
  const bool direct = rule_.kind == RuleKind::kDirect;
  if (!direct) {
    for (const char* m : {"ir", "vis"}) {
      declare_conv(spec, prefix_ + "/stem_" + m, 1, channels_, 3);
      spec[prefix_ + "/decomp_" + m + "/a"] = ParamSpec{{1}, Init::kConstant, 1.0};
      spec[prefix_ + "/decomp_" + m + "/b"] = ParamSpec{{1}, Init::kConstant, 1.0};
    }
  }
  for (int s = 0; s < kNumSlots; ++s) {
    if (direct && s < static_cast<int>(SlotRole::kPostFusion1)) continue;
    for (const auto& b : slots_[static_cast<std::size_t>(s)]) b.declare(spec);
  }
  declare_rule(spec, rule_, channels_, prefix_ + "/rule");
  declare_conv(spec, prefix_ + "/head", channels_, 1, 3);
  if (relaxed_) {
    spec[kAlphaName] = ParamSpec{{kNumSlots, static_cast<int>(candidates_.size())}, Init::kZeros};
  }
  return spec;
}

std::string FusionNetwork::describe() const {
  if (!relaxed_) return arch_.to_string();
  std::ostringstream os;
  os << "supernet{";
  for (std::size_t i = 0; i < candidates_.size(); ++i) os << (i ? "," : "") << candidates_[i].name();
  os << "}|" << rule_.name() << '|' << channels_;
  return os.str();
}

template <typename S>
Var<S> FusionNetwork::run_slot(Tape<S>& tape, int slot, Var<S> x) const {
  const auto& blocks = slots_[static_cast<std::size_t>(slot)];
  if (!relaxed_) return blocks.front().forward(tape, x);
  return mixed_forward<S>(tape, tape.param(kAlphaName), slot, blocks, x);
}

template <typename S>
FusionOutput<S> FusionNetwork::forward(Tape<S>& tape, Var<S> x, Var<S> y) const {
  if (x.shape().size() != 4 || x.shape()[1] != 1 || x.shape() != y.shape()) {
    throw ValidationError("fusion network expects two (B,1,H,W) images of equal shape, got " +
                          to_string(x.shape()) + " and " + to_string(y.shape()));
  }
  FusionOutput<S> out;
  if (rule_.kind == RuleKind::kDirect) {
    out.fused = apply_rule(tape, rule_, prefix_ + "/rule", x, y);
  } else {
    auto branch = [&](const char* m, Var<S> image, int low_slot, Var<S>& e, Var<S>& res, Decomposition<S>& dec) {
      e = ops::relu(conv(tape, prefix_ + "/stem_" + m, image));
      res = residual_feature(e);
      dec = decompose(e, res, tape.param(prefix_ + "/decomp_" + m + "/a"),
                      tape.param(prefix_ + "/decomp_" + m + "/b"));
      return run_slot(tape, low_slot, dec.low) + run_slot(tape, low_slot + 1, dec.high);
    };
    auto ir = branch("ir", x, static_cast<int>(SlotRole::kIrLow), out.e_ir, out.res_ir, out.dec_ir);
    auto vis = branch("vis", y, static_cast<int>(SlotRole::kVisLow), out.e_vis, out.res_vis, out.dec_vis);
    out.fused = apply_rule(tape, rule_, prefix_ + "/rule", ir, vis);
  }
  auto p = run_slot(tape, static_cast<int>(SlotRole::kPostFusion1), out.fused);
  p = run_slot(tape, static_cast<int>(SlotRole::kPostFusion2), p);
  out.u = ops::sigmoid(conv(tape, prefix_ + "/head", p));
  return out;
}

template <typename S>
ParameterStore<S> extract_discrete_parameters(const ParameterStore<S>& supernet, const FusionNetwork& relaxed,
                                              const ArchSpec& chosen) {
  if (!relaxed.relaxed()) throw ValidationError("extract_discrete_parameters: network is not a supernet");
  FusionNetwork discrete(chosen, relaxed.prefix());
  ParameterStore<S> out(supernet.seed());
  for (const auto& [name, ps] : discrete.parameter_specs()) {
    std::string source = name;
    const std::string slot_tag = relaxed.prefix() + "/slot";
    if (starts_with(name, slot_tag)) {
      const int slot = name[slot_tag.size()] - '0';
      const auto& cands = relaxed.candidates();
      std::size_t c = 0;
      while (c < cands.size() && !(cands[c] == chosen.slots[static_cast<std::size_t>(slot)])) ++c;
      if (c == cands.size()) {
        throw ValidationError("operation " + chosen.slots[static_cast<std::size_t>(slot)].name() +
                              " is not in the supernet's candidate set");
      }
      const std::string head = slot_tag + std::to_string(slot);
      source = head + "/c" + std::to_string(c) + name.substr(head.size());
    }
    out.set(name, supernet.at(source));
  }
  return out;
}

template FusionOutput<float> FusionNetwork::forward(Tape<float>&, Var<float>, Var<float>) const;
template FusionOutput<double> FusionNetwork::forward(Tape<double>&, Var<double>, Var<double>) const;
template ParameterStore<float> extract_discrete_parameters(const ParameterStore<float>&, const FusionNetwork&,
                                                           const ArchSpec&);
template ParameterStore<double> extract_discrete_parameters(const ParameterStore<double>&, const FusionNetwork&,
                                                            const ArchSpec&);

}  // namespace afuse
