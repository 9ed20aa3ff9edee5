#pragma once

#include <cstddef>
#include <span>
#include <vector>

#include "emdiff/error.hpp"
#include "emdiff/tensor.hpp"

namespace emdiff {

/// Row-major collection of equally sized float vectors.
struct SampleSet {
  std::size_t dim = 0;
  std::vector<float> values;

  SampleSet() = default;
  SampleSet(std::size_t d, std::vector<float> v) : dim(d), values(std::move(v)) {
    if (d == 0 || values.size() % d != 0) throw ShapeError("sample set: values are not a multiple of the dimension");
  }

  std::size_t size() const noexcept { return dim ? values.size() / dim : 0; }
  bool empty() const noexcept { return size() == 0; }

  std::span<const float> row(std::size_t i) const { return std::span<const float>(values).subspan(i * dim, dim); }
  std::span<float> row(std::size_t i) { return std::span<float>(values).subspan(i * dim, dim); }

  void push_back(std::span<const float> r) {
    if (dim == 0) dim = r.size();
    if (r.size() != dim) throw ShapeError("sample set: row has the wrong dimension");
    values.insert(values.end(), r.begin(), r.end());
  }

  SampleSet subset(std::span<const std::size_t> idx) const {
    SampleSet s;
    s.dim = dim;
    s.values.reserve(idx.size() * dim);
    for (auto i : idx) {
      auto r = row(i);
      s.values.insert(s.values.end(), r.begin(), r.end());
    }
    return s;
  }

  Tensor as_tensor() const { return Tensor({size(), dim}, values); }

  std::vector<std::vector<float>> rows() const {
    std::vector<std::vector<float>> out;
    for (std::size_t i = 0; i < size(); ++i) out.emplace_back(row(i).begin(), row(i).end());
    return out;
  }

  static SampleSet from_rows(const std::vector<std::vector<float>>& rows) {
    SampleSet s;
    for (const auto& r : rows) s.push_back(r);
    return s;
  }
};

}  // namespace emdiff
