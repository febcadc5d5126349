#include "afuse/blocks.hpp"

#include <algorithm>
#include <charconv>

#include "afuse/errors.hpp"

namespace afuse {

namespace {

struct FamilyName {
  OpFamily family;
  std::string_view name;
};

constexpr FamilyName kFamilies[] = {
    {OpFamily::kConv, "C"},
    {OpFamily::kDilatedConv, "DC"},
    {OpFamily::kResidual, "RB"},
    {OpFamily::kDense, "DB"},
    {OpFamily::kSpatialAttention, "SA"},
    {OpFamily::kChannelAttention, "CA"},
    {OpFamily::kIdentity, "ID"},
    {OpFamily::kZero, "ZERO"},
};

int ca_hidden(int channels) { return std::max(1, channels / 4); }

}  // namespace

bool OpCode::uses_kernel() const {
  switch (family) {
    case OpFamily::kConv:
    case OpFamily::kDilatedConv:
    case OpFamily::kResidual:
    case OpFamily::kDense:
      return true;
    default:
      return false;
  }
}

std::string OpCode::name() const {
  std::string base;
  for (const auto& f : kFamilies) {
    if (f.family == family) base = f.name;
  }
  return uses_kernel() ? std::to_string(kernel) + "-" + base : base;
}

OpCode OpCode::parse(std::string_view text) {
  OpCode code;
  std::string_view family = text;
  if (auto dash = text.find('-'); dash != std::string_view::npos) {
    const auto digits = text.substr(0, dash);
    auto [ptr, ec] = std::from_chars(digits.data(), digits.data() + digits.size(), code.kernel);
    if (ec != std::errc() || ptr != digits.data() + digits.size()) {
      throw ValidationError("bad operation code '" + std::string(text) + "'");
    }
    family = text.substr(dash + 1);
  }
  bool found = false;
  for (const auto& f : kFamilies) {
    if (f.name == family) {
      code.family = f.family;
      found = true;
    }
  }
  if (!found) throw ValidationError("unknown operation family in '" + std::string(text) + "'");
  if (code.uses_kernel() && text.find('-') == std::string_view::npos) {
    throw ValidationError("operation '" + std::string(text) + "' needs a kernel size, e.g. 3-" + std::string(family));
  }
  if (code.uses_kernel() && code.kernel != 3 && code.kernel != 5 && code.kernel != 7) {
    throw ValidationError("kernel size must be 3, 5 or 7 in '" + std::string(text) + "'");
  }
  if (!code.uses_kernel()) code.kernel = 3;
  return code;
}

int dense_growth(int out_ch) { return std::max(1, out_ch / 2); }

void declare_conv(ParamSpecMap& spec, const std::string& prefix, int in_ch, int out_ch, int kernel) {
  spec[prefix + "/w"] = ParamSpec{{out_ch, in_ch, kernel, kernel}, Init::kHeNormal};
  spec[prefix + "/b"] = ParamSpec{{out_ch}, Init::kZeros};
}

Block::Block(OpCode code, int in_ch, int out_ch, std::string prefix)
    : code_(code), in_ch_(in_ch), out_ch_(out_ch), prefix_(std::move(prefix)) {}

Block build_block(OpCode code, int in_ch, int out_ch, const std::string& prefix) {
  if (in_ch <= 0 || out_ch <= 0) {
    throw ValidationError("block " + code.name() + " needs positive channel counts");
  }
  if (code.uses_kernel() && code.kernel != 3 && code.kernel != 5 && code.kernel != 7) {
    throw ValidationError("block " + code.name() + " has unsupported kernel size");
  }
  return Block(code, in_ch, out_ch, prefix);
}

void Block::declare(ParamSpecMap& spec) const {
  const int k = code_.kernel;
  const bool project = in_ch_ != out_ch_;
  switch (code_.family) {
    case OpFamily::kConv:
    case OpFamily::kDilatedConv:
      declare_conv(spec, prefix_ + "/conv", in_ch_, out_ch_, k);
      break;
    case OpFamily::kResidual:
      declare_conv(spec, prefix_ + "/conv1", in_ch_, out_ch_, k);
      declare_conv(spec, prefix_ + "/conv2", out_ch_, out_ch_, k);
      if (project) declare_conv(spec, prefix_ + "/skip", in_ch_, out_ch_, 1);
      break;
    case OpFamily::kDense: {
      const int g = dense_growth(out_ch_);
      for (int l = 0; l < 3; ++l) {
        declare_conv(spec, prefix_ + "/layer" + std::to_string(l), in_ch_ + l * g, g, k);
      }
      declare_conv(spec, prefix_ + "/transition", in_ch_ + 3 * g, out_ch_, 1);
      break;
    }
    case OpFamily::kSpatialAttention:
      if (project) declare_conv(spec, prefix_ + "/proj", in_ch_, out_ch_, 1);
      declare_conv(spec, prefix_ + "/mask", 2, 1, 7);
      break;
    case OpFamily::kChannelAttention:
      if (project) declare_conv(spec, prefix_ + "/proj", in_ch_, out_ch_, 1);
      declare_conv(spec, prefix_ + "/fc1", out_ch_, ca_hidden(out_ch_), 1);
      declare_conv(spec, prefix_ + "/fc2", ca_hidden(out_ch_), out_ch_, 1);
      break;
    case OpFamily::kIdentity:
      if (project) declare_conv(spec, prefix_ + "/proj", in_ch_, out_ch_, 1);
      break;
    case OpFamily::kZero:
      break;
  }
}

std::size_t Block::parameter_count() const {
  ParamSpecMap spec;
  declare(spec);
  std::size_t n = 0;
  for (const auto& [name, ps] : spec) n += numel(ps.shape);
  return n;
}

template <typename S>
Var<S> Block::forward(Tape<S>& tape, Var<S> x) const {
  if (x.shape().size() != 4 || x.shape()[1] != in_ch_) {
    throw ValidationError("block " + prefix_ + " (" + code_.name() + ") expects " + std::to_string(in_ch_) +
                          " channels, got " + to_string(x.shape()));
  }
  const bool project = in_ch_ != out_ch_;
  switch (code_.family) {
    case OpFamily::kConv:
      return ops::relu(conv(tape, prefix_ + "/conv", x));
    case OpFamily::kDilatedConv:
      return ops::relu(conv(tape, prefix_ + "/conv", x, 2));
    case OpFamily::kResidual: {
      auto skip = project ? conv(tape, prefix_ + "/skip", x) : x;
      auto r = conv(tape, prefix_ + "/conv2", ops::relu(conv(tape, prefix_ + "/conv1", x)));
      return skip + r;
    }
    case OpFamily::kDense: {
      std::vector<Var<S>> features{x};
      for (int l = 0; l < 3; ++l) {
        auto in = features.size() == 1 ? x : ops::concat<S>(features);
        features.push_back(ops::relu(conv(tape, prefix_ + "/layer" + std::to_string(l), in)));
      }
      return conv(tape, prefix_ + "/transition", ops::concat<S>(features));
    }
    case OpFamily::kSpatialAttention: {
      auto h = project ? conv(tape, prefix_ + "/proj", x) : x;
      auto pooled = ops::concat({ops::channel_mean(h), ops::channel_max(h)});
      return h * ops::sigmoid(conv(tape, prefix_ + "/mask", pooled));
    }
    case OpFamily::kChannelAttention: {
      auto h = project ? conv(tape, prefix_ + "/proj", x) : x;
      auto z = ops::relu(conv(tape, prefix_ + "/fc1", ops::global_avg_pool(h)));
      return h * ops::sigmoid(conv(tape, prefix_ + "/fc2", z));
    }
    case OpFamily::kIdentity:
      return project ? conv(tape, prefix_ + "/proj", x) : x;
    case OpFamily::kZero: {
      Shape s = x.shape();
      s[1] = out_ch_;
      return tape.constant(Tensor<S>(s));
    }
  }
  throw ValidationError("unknown operation family");
}

template Var<float> Block::forward(Tape<float>&, Var<float>) const;
template Var<double> Block::forward(Tape<double>&, Var<double>) const;

}  // namespace afuse
