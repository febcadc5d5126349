#include "afuse/arch.hpp"

#include <charconv>
#include <sstream>

#include "afuse/errors.hpp"

namespace afuse {

std::string_view slot_name(int slot) {
  static constexpr std::string_view kNames[kNumSlots] = {"ir-low",  "ir-high",       "vis-low",
                                                         "vis-high", "post-fusion-1", "post-fusion-2"};
  if (slot < 0 || slot >= kNumSlots) throw ValidationError("slot index out of range");
  return kNames[slot];
}

ArchSpec ArchSpec::uniform(OpCode op, FusionRule rule, int base_channels) {
  ArchSpec spec;
  spec.slots.fill(op);
  spec.rule = rule;
  spec.base_channels = base_channels;
  return spec;
}

ArchSpec ArchSpec::searched_reference(int base_channels) {
  ArchSpec spec;
  spec.slots = {OpCode::parse("3-DB"), OpCode::parse("3-DC"), OpCode::parse("3-DB"),
                OpCode::parse("3-DB"), OpCode::parse("CA"),   OpCode::parse("7-RB")};
  spec.rule = FusionRule{RuleKind::kAdaptiveAverage};
  spec.base_channels = base_channels;
  return spec;
}

std::string ArchSpec::to_string() const {
  std::ostringstream os;
  for (int i = 0; i < kNumSlots; ++i) os << (i ? "," : "") << slots[i].name();
  os << '|' << rule.name() << '|' << base_channels;
  return os.str();
}

ArchSpec ArchSpec::parse(std::string_view text) {
  const auto bar1 = text.find('|');
  const auto bar2 = bar1 == std::string_view::npos ? bar1 : text.find('|', bar1 + 1);
  if (bar2 == std::string_view::npos) {
    throw ValidationError("architecture must read 'op,op,op,op,op,op|RULE|channels', got '" + std::string(text) + "'");
  }
  ArchSpec spec;
  std::string_view ops = text.substr(0, bar1);
  for (int i = 0; i < kNumSlots; ++i) {
    const auto comma = ops.find(',');
    if ((comma == std::string_view::npos) != (i == kNumSlots - 1)) {
      throw ValidationError("architecture needs exactly 6 slots: '" + std::string(text) + "'");
    }
    spec.slots[i] = OpCode::parse(ops.substr(0, comma));
    if (comma != std::string_view::npos) ops = ops.substr(comma + 1);
  }
  spec.rule = FusionRule::parse(text.substr(bar1 + 1, bar2 - bar1 - 1));
  const auto ch = text.substr(bar2 + 1);
  auto [ptr, ec] = std::from_chars(ch.data(), ch.data() + ch.size(), spec.base_channels);
  if (ec != std::errc() || ptr != ch.data() + ch.size() || spec.base_channels <= 0) {
    throw ValidationError("bad channel count in architecture '" + std::string(text) + "'");
  }
  return spec;
}

}  // namespace afuse
