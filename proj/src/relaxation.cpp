#include "afuse/relaxation.hpp"

#include "afuse/errors.hpp"

namespace afuse {

std::vector<OpCode> Relaxation::default_candidates() {
  return {OpCode::parse("3-DC"), OpCode::parse("7-RB"), OpCode::parse("3-DB"), OpCode::parse("CA")};
}

Relaxation Relaxation::uniform(std::vector<OpCode> candidates) {
  if (candidates.empty()) throw ValidationError("relaxation needs at least one candidate");
  Relaxation r;
  r.alpha = Eigen::MatrixXd::Zero(kNumSlots, static_cast<Eigen::Index>(candidates.size()));
  r.candidates = std::move(candidates);
  return r;
}

template <typename S>
Relaxation Relaxation::from_store(std::vector<OpCode> candidates, const ParameterStore<S>& store) {
  Relaxation r = uniform(std::move(candidates));
  const auto& t = store.at(kAlphaName);
  if (t.shape() != Shape{kNumSlots, static_cast<int>(r.candidates.size())}) {
    throw ValidationError("alpha has shape " + to_string(t.shape()) + ", expected (6," +
                          std::to_string(r.candidates.size()) + ")");
  }
  for (Eigen::Index i = 0; i < r.alpha.rows(); ++i) {
    for (Eigen::Index j = 0; j < r.alpha.cols(); ++j) {
      r.alpha(i, j) = static_cast<double>(t[static_cast<std::size_t>(i * r.alpha.cols() + j)]);
    }
  }
  return r;
}

Eigen::MatrixXd Relaxation::weights() const {
  Eigen::MatrixXd w = alpha;
  for (Eigen::Index i = 0; i < w.rows(); ++i) {
    const double m = w.row(i).maxCoeff();
    w.row(i) = (w.row(i).array() - m).exp().matrix();
    w.row(i) /= w.row(i).sum();
  }
  return w;
}

template <typename S>
Var<S> mixed_forward(Tape<S>& tape, Var<S> alpha, int slot, std::span<const Block> candidates, Var<S> input) {
  if (candidates.empty()) throw ValidationError("mixed_forward: no candidates");
  if (alpha.shape().size() != 2 || alpha.shape()[1] != static_cast<int>(candidates.size()) ||
      slot < 0 || slot >= alpha.shape()[0]) {
    throw ValidationError("mixed_forward: alpha " + to_string(alpha.shape()) + " does not cover slot " +
                          std::to_string(slot) + " with " + std::to_string(candidates.size()) + " candidates");
  }
  auto weights = ops::softmax(ops::slice(alpha, 0, slot, 1), 1);
  Var<S> sum;
  for (std::size_t o = 0; o < candidates.size(); ++o) {
    auto y = candidates[o].forward(tape, input);
    if (o > 0 && y.shape() != sum.shape()) {
      throw ValidationError("mixed_forward: candidate " + candidates[o].code().name() + " yields " +
                            to_string(y.shape()) + ", expected " + to_string(sum.shape()));
    }
    auto term = y * ops::slice(weights, 1, static_cast<int>(o), 1);
    sum = o == 0 ? term : sum + term;
  }
  return sum;
}

ArchSpec discretize(const Relaxation& relax, const FusionRule& rule, int base_channels) {
  if (relax.alpha.rows() != kNumSlots || relax.alpha.cols() != static_cast<Eigen::Index>(relax.candidates.size())) {
    throw ValidationError("discretize: alpha does not match the candidate set");
  }
  ArchSpec spec;
  spec.rule = rule;
  spec.base_channels = base_channels;
  for (int s = 0; s < kNumSlots; ++s) {
    Eigen::Index best = 0;
    for (Eigen::Index j = 1; j < relax.alpha.cols(); ++j) {
      if (relax.alpha(s, j) > relax.alpha(s, best)) best = j;
    }
    spec.slots[static_cast<std::size_t>(s)] = relax.candidates[static_cast<std::size_t>(best)];
  }
  return spec;
}

template Relaxation Relaxation::from_store(std::vector<OpCode>, const ParameterStore<float>&);
template Relaxation Relaxation::from_store(std::vector<OpCode>, const ParameterStore<double>&);
template Var<float> mixed_forward(Tape<float>&, Var<float>, int, std::span<const Block>, Var<float>);
template Var<double> mixed_forward(Tape<double>&, Var<double>, int, std::span<const Block>, Var<double>);

}  // namespace afuse
