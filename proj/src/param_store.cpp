#include "max360iq/param_store.hpp"

#include "max360iq/errors.hpp"

namespace max360iq {

const char* param_kind_name(ParamKind kind) {
  switch (kind) {
    case ParamKind::Weight: return "weight";
    case ParamKind::Bias: return "bias";
    case ParamKind::NormScale: return "norm";
    case ParamKind::Exponent: return "exponent";
    case ParamKind::RelBias: return "relbias";
    case ParamKind::Buffer: return "buffer";
  }
  return "?";
}

ParamStore::ParamStore(const ParamStore& other) { *this = other; }

ParamStore& ParamStore::operator=(const ParamStore& other) {
  if (this == &other) return *this;
  entries_.clear();
  index_ = other.index_;
  entries_.reserve(other.entries_.size());
  for (const auto& e : other.entries_) entries_.push_back(std::make_unique<ParamEntry>(*e));
  return *this;
}

ParamEntry& ParamStore::add(const std::string& name, ParamKind kind, Tensor value) {
  if (contains(name)) throw PreconditionError("duplicate parameter name: " + name);
  auto e = std::make_unique<ParamEntry>();
  e->name = name;
  e->kind = kind;
  e->grad = Tensor(value.shape(), 0.0);
  e->value = std::move(value);
  index_.emplace(name, entries_.size());
  entries_.push_back(std::move(e));
  return *entries_.back();
}

ParamEntry& ParamStore::at(const std::string& name) {
  auto it = index_.find(name);
  if (it == index_.end()) throw PreconditionError("unknown parameter: " + name);
  return *entries_[it->second];
}

const ParamEntry& ParamStore::at(const std::string& name) const {
  auto it = index_.find(name);
  if (it == index_.end()) throw PreconditionError("unknown parameter: " + name);
  return *entries_[it->second];
}

ad::Var ParamStore::var(const std::string& name) {
  ParamEntry& e = at(name);
  if (!e.trainable()) return ad::constant(e.value);
  return ad::leaf(e.value, &e.grad);
}

void ParamStore::zero_grad() {
  for (auto& e : entries_) e->grad.fill(0.0);
}

std::size_t ParamStore::trainable_count() const {
  std::size_t n = 0;
  for (const auto& e : entries_)
    if (e->trainable()) n += e->value.numel();
  return n;
}

}  // namespace max360iq
