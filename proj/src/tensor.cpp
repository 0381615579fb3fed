#include "snapdistill/tensor.hpp"

#include <cstring>

namespace snapdistill {

std::string shape_string(const Shape& shape) {
  std::string out = "[";
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) out += ", ";
    out += std::to_string(shape[i]);
  }
  return out + "]";
}

std::uint64_t fnv1a(const void* bytes, std::size_t n, std::uint64_t seed) {
  const auto* p = static_cast<const unsigned char*>(bytes);
  std::uint64_t h = seed;
  for (std::size_t i = 0; i < n; ++i) {
    h ^= p[i];
    h *= 0x100000001b3ULL;
  }
  return h;
}

template <typename Scalar>
bool Tensor<Scalar>::identical(const Tensor& other) const {
  if (shape_ != other.shape_ || values_.size() != other.values_.size()) return false;
  return std::memcmp(values_.data(), other.values_.data(),
                     static_cast<std::size_t>(values_.size()) * sizeof(Scalar)) == 0;
}

template <typename Scalar>
std::uint64_t checksum(const Tensor<Scalar>& t, std::uint64_t seed) {
  std::uint64_t h = fnv1a(t.shape().data(), t.shape().size() * sizeof(Index), seed);
  return fnv1a(t.data(), static_cast<std::size_t>(t.size()) * sizeof(Scalar), h);
}

template class Tensor<float>;
template class Tensor<double>;
template std::uint64_t checksum(const Tensor<float>&, std::uint64_t);
template std::uint64_t checksum(const Tensor<double>&, std::uint64_t);

}  // namespace snapdistill
