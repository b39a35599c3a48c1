#include "vitplast/parameters.hpp"

#include <cmath>

#include "vitplast/errors.hpp"

namespace vitplast {

std::string_view component_name(ComponentKind kind) {
  switch (kind) {
    case ComponentKind::LN1: return "LN1";
    case ComponentKind::MHA: return "MHA";
    case ComponentKind::LN2: return "LN2";
    case ComponentKind::FC1: return "FC1";
    case ComponentKind::FC2: return "FC2";
  }
  return "?";
}

ComponentKind parse_component(std::string_view name) {
  for (ComponentKind k : kComponentKinds) {
    if (component_name(k) == name) return k;
  }
  throw Error("unknown component '" + std::string(name) + "' (expected LN1, MHA, LN2, FC1, FC2)");
}

std::string_view group_name(ParamGroup group) {
  switch (group) {
    case ParamGroup::LN1: return "LN1";
    case ParamGroup::MHA: return "MHA";
    case ParamGroup::LN2: return "LN2";
    case ParamGroup::FC1: return "FC1";
    case ParamGroup::FC2: return "FC2";
    case ParamGroup::ALL: return "ALL";
    case ParamGroup::HEAD: return "HEAD";
  }
  return "?";
}

ParamGroup parse_group(std::string_view name) {
  for (ParamGroup g : {ParamGroup::LN1, ParamGroup::MHA, ParamGroup::LN2, ParamGroup::FC1,
                       ParamGroup::FC2, ParamGroup::ALL, ParamGroup::HEAD}) {
    if (group_name(g) == name) return g;
  }
  throw Error("unknown group '" + std::string(name) +
              "' (expected LN1, MHA, LN2, FC1, FC2, ALL, HEAD)");
}

ParamGroup group_of(ComponentKind kind) {
  switch (kind) {
    case ComponentKind::LN1: return ParamGroup::LN1;
    case ComponentKind::MHA: return ParamGroup::MHA;
    case ComponentKind::LN2: return ParamGroup::LN2;
    case ComponentKind::FC1: return ParamGroup::FC1;
    case ComponentKind::FC2: return ParamGroup::FC2;
  }
  return ParamGroup::ALL;
}

bool belongs_to(const ParamEntry& entry, ParamGroup group) {
  switch (group) {
    case ParamGroup::ALL: return true;
    case ParamGroup::HEAD: return entry.role == ParamRole::Head;
    default: return entry.kind && group_of(*entry.kind) == group;
  }
}

ParamEntry& ParameterStore::add(std::string name, ParamRole role,
                                std::optional<ComponentKind> kind, int layer, Tensor value) {
  if (index_.count(name)) throw Error("duplicate parameter name '" + name + "'");
  if ((role == ParamRole::Component) != kind.has_value()) {
    throw Error("parameter '" + name + "': component kind must be set exactly for block tensors");
  }
  value.set_name(name);
  index_.emplace(name, entries_.size());
  entries_.push_back({std::move(name), role, kind, layer, std::move(value), false});
  return entries_.back();
}

bool ParameterStore::contains(std::string_view name) const {
  return index_.count(std::string(name)) != 0;
}

std::size_t ParameterStore::index_of(std::string_view name) const {
  auto it = index_.find(std::string(name));
  if (it == index_.end()) throw Error("no parameter named '" + std::string(name) + "'");
  return it->second;
}

ParamEntry& ParameterStore::entry(std::string_view name) { return entries_[index_of(name)]; }

const ParamEntry& ParameterStore::entry(std::string_view name) const {
  return entries_[index_of(name)];
}

void ParameterStore::set_trainable(ParamGroup group, bool trainable) {
  for (ParamEntry& e : entries_) {
    if (belongs_to(e, group)) e.trainable = trainable;
  }
}

void ParameterStore::freeze_all() {
  for (ParamEntry& e : entries_) e.trainable = false;
}

std::size_t ParameterStore::count(ParamGroup group) const {
  std::size_t n = 0;
  for (const ParamEntry& e : entries_) {
    if (belongs_to(e, group)) n += e.value.size();
  }
  return n;
}

std::size_t ParameterStore::trainable_count() const {
  std::size_t n = 0;
  for (const ParamEntry& e : entries_) {
    if (e.trainable) n += e.value.size();
  }
  return n;
}

Gradients Gradients::zeros_like_trainable(const ParameterStore& params) {
  Gradients g;
  g.slots.resize(params.size());
  for (std::size_t i = 0; i < params.size(); ++i) {
    const ParamEntry& e = params.entries()[i];
    if (e.trainable) g.slots[i] = Tensor(e.value.shape());
  }
  return g;
}

const Tensor* Gradients::find(const ParameterStore& params, std::string_view name) const {
  const std::size_t i = params.index_of(name);
  if (i >= slots.size() || !slots[i]) return nullptr;
  return &*slots[i];
}

double Gradients::global_norm() const {
  double s = 0.0;
  for (const auto& slot : slots) {
    if (!slot) continue;
    for (double v : slot->values()) s += v * v;
  }
  return std::sqrt(s);
}

}  // namespace vitplast
