#pragma once

#include <memory>
#include <string>
#include <unordered_map>
#include <vector>

#include "max360iq/autograd.hpp"
#include "max360iq/tensor.hpp"

namespace max360iq {

/// Role of a stored tensor; drives optimizer treatment.
enum class ParamKind {
  Weight,  // conv/linear/attention matrices: weight decay applies
  Bias,
  NormScale,  // batch/layer norm gamma and beta
  Exponent,   // GeM pooling exponents
  RelBias,    // relative-position bias tables
  Buffer,     // running statistics: not trainable
};

const char* param_kind_name(ParamKind kind);

struct ParamEntry {
  std::string name;
  ParamKind kind;
  Tensor value;
  Tensor grad;  // same shape as value

  bool trainable() const { return kind != ParamKind::Buffer; }
  bool decays() const { return kind == ParamKind::Weight; }
};

/// Named parameters in insertion order. Entry addresses are stable for the
/// lifetime of the store.
class ParamStore {
 public:
  ParamStore() = default;
  ParamStore(const ParamStore& other);
  ParamStore& operator=(const ParamStore& other);
  ParamStore(ParamStore&&) noexcept = default;
  ParamStore& operator=(ParamStore&&) noexcept = default;

  ParamEntry& add(const std::string& name, ParamKind kind, Tensor value);
  bool contains(const std::string& name) const { return index_.count(name) != 0; }
  ParamEntry& at(const std::string& name);
  const ParamEntry& at(const std::string& name) const;

  // Graph leaf bound to the entry's gradient slot.
  ad::Var var(const std::string& name);

  void zero_grad();
  std::size_t size() const { return entries_.size(); }
  std::size_t trainable_count() const;  // scalar parameter count, buffers excluded

  auto begin() { return entries_.begin(); }
  auto end() { return entries_.end(); }
  auto begin() const { return entries_.cbegin(); }
  auto end() const { return entries_.cend(); }

 private:
  std::vector<std::unique_ptr<ParamEntry>> entries_;
  std::unordered_map<std::string, std::size_t> index_;
};

}  // namespace max360iq
