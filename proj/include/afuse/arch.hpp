#pragma once

#include <array>
#include <string>
#include <string_view>

#include "afuse/blocks.hpp"
#include "afuse/fusion_rules.hpp"

namespace afuse {

inline constexpr int kNumSlots = 6;

/// Slot roles, in order.
enum class SlotRole { kIrLow, kIrHigh, kVisLow, kVisHigh, kPostFusion1, kPostFusion2 };

std::string_view slot_name(int slot);

/// A concrete fusion network: one operation per slot, a cross-modal rule and
/// the per-modality feature width.
struct ArchSpec {
  std::array<OpCode, kNumSlots> slots{};
  FusionRule rule;
  int base_channels = 16;

  /// Every slot set to `op`.
  static ArchSpec uniform(OpCode op, FusionRule rule, int base_channels);
  /// The searched architecture: 3-DB, 3-DC, 3-DB, 3-DB, CA, 7-RB with AA.
  static ArchSpec searched_reference(int base_channels);

  /// "3-DB,3-DC,3-DB,3-DB,CA,7-RB|AA|16"
  std::string to_string() const;
  static ArchSpec parse(std::string_view text);

  friend bool operator==(const ArchSpec&, const ArchSpec&) = default;
};

}  // namespace afuse
