#include "afuse/batch.hpp"

#include <algorithm>

#include "afuse/errors.hpp"

namespace afuse {

namespace {

Tensor<float> take(const Tensor<float>& t, int start, int count) {
  Shape s = t.shape();
  const std::size_t per = t.size() / static_cast<std::size_t>(s[0]);
  s[0] = count;
  return Tensor<float>(s, t.array().segment(static_cast<Eigen::Index>(start * per),
                                            static_cast<Eigen::Index>(count * per)).eval());
}

Tensor<float> stack(const Tensor<float>& a, const Tensor<float>& b) {
  Shape s = a.shape();
  s[0] += b.dim(0);
  Tensor<float>::Array data(static_cast<Eigen::Index>(a.size() + b.size()));
  data << a.array(), b.array();
  return Tensor<float>(s, std::move(data));
}

}  // namespace

SampleBatch SampleBatch::slice(int start, int count) const {
  if (start < 0 || count <= 0 || start + count > size()) {
    throw ValidationError("batch slice [" + std::to_string(start) + ", " + std::to_string(start + count) +
                          ") out of range for batch of " + std::to_string(size()));
  }
  const std::size_t per = labels.size() / static_cast<std::size_t>(size());
  SampleBatch out;
  out.x = take(x, start, count);
  out.y = take(y, start, count);
  out.labels.assign(labels.begin() + static_cast<std::ptrdiff_t>(start * per),
                    labels.begin() + static_cast<std::ptrdiff_t>((start + count) * per));
  return out;
}

SampleBatch SampleBatch::gather(std::span<const int> indices) const {
  const int n = static_cast<int>(indices.size());
  if (n == 0) return {};
  const Eigen::Index per = static_cast<Eigen::Index>(x.size()) / size();
  const std::size_t lper = labels.size() / static_cast<std::size_t>(size());
  Shape s = x.shape();
  s[0] = n;
  SampleBatch out{Tensor<float>(s), Tensor<float>(s), LabelMap(lper * indices.size())};
  for (int k = 0; k < n; ++k) {
    const int i = indices[static_cast<std::size_t>(k)];
    if (i < 0 || i >= size()) throw ValidationError("sample index " + std::to_string(i) + " out of range");
    out.x.array().segment(k * per, per) = x.array().segment(i * per, per);
    out.y.array().segment(k * per, per) = y.array().segment(i * per, per);
    std::copy_n(labels.begin() + static_cast<std::ptrdiff_t>(i * lper), lper,
                out.labels.begin() + static_cast<std::ptrdiff_t>(k * lper));
  }
  return out;
}

SampleBatch SampleBatch::join(const SampleBatch& a, const SampleBatch& b) {
  if (a.size() == 0) return b;
  if (b.size() == 0) return a;
  if (a.height() != b.height() || a.width() != b.width()) throw ValidationError("cannot join batches of different sizes");
  SampleBatch out;
  out.x = stack(a.x, b.x);
  out.y = stack(a.y, b.y);
  out.labels = a.labels;
  out.labels.insert(out.labels.end(), b.labels.begin(), b.labels.end());
  return out;
}

}  // namespace afuse
