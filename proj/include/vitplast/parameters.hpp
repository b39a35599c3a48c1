#pragma once

#include <array>
#include <optional>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include "vitplast/tensor.hpp"

namespace vitplast {

// The five components of a transformer block, in forward order.
enum class ComponentKind { LN1, MHA, LN2, FC1, FC2 };

inline constexpr std::array<ComponentKind, 5> kComponentKinds = {
    ComponentKind::LN1, ComponentKind::MHA, ComponentKind::LN2, ComponentKind::FC1,
    ComponentKind::FC2};

std::string_view component_name(ComponentKind kind);
ComponentKind parse_component(std::string_view name);

// Parameter groups used for counting and for selective training. The first
// five coincide with ComponentKind; ALL is every tensor, HEAD is the
// classification head including its LayerNorm.
enum class ParamGroup { LN1, MHA, LN2, FC1, FC2, ALL, HEAD };

std::string_view group_name(ParamGroup group);
ParamGroup parse_group(std::string_view name);
ParamGroup group_of(ComponentKind kind);

// What a stored tensor belongs to.
enum class ParamRole { Component, Embedding, PosEmbed, ClsToken, Head };

struct ParamEntry {
  std::string name;
  ParamRole role = ParamRole::Component;
  std::optional<ComponentKind> kind;  // set iff role == Component
  int layer = -1;                     // block index, -1 outside blocks
  Tensor value;
  bool trainable = false;
};

bool belongs_to(const ParamEntry& entry, ParamGroup group);

/// Ordered, name-indexed collection of model tensors. Insertion order is
/// preserved and is the order used by serialization and gradient reduction.
class ParameterStore {
 public:
  ParamEntry& add(std::string name, ParamRole role, std::optional<ComponentKind> kind, int layer,
                  Tensor value);

  bool contains(std::string_view name) const;
  std::size_t index_of(std::string_view name) const;  // throws if absent
  ParamEntry& entry(std::string_view name);
  const ParamEntry& entry(std::string_view name) const;
  Tensor& at(std::string_view name) { return entry(name).value; }
  const Tensor& at(std::string_view name) const { return entry(name).value; }

  std::vector<ParamEntry>& entries() noexcept { return entries_; }
  const std::vector<ParamEntry>& entries() const noexcept { return entries_; }
  std::size_t size() const noexcept { return entries_.size(); }

  void set_trainable(ParamGroup group, bool trainable);
  void freeze_all();
  std::size_t count(ParamGroup group) const;
  std::size_t trainable_count() const;

 private:
  std::vector<ParamEntry> entries_;
  std::unordered_map<std::string, std::size_t> index_;
};

/// Gradients aligned with a ParameterStore: slot i holds the gradient of
/// entry i, or nothing when that entry was not trainable.
struct Gradients {
  std::vector<std::optional<Tensor>> slots;

  static Gradients zeros_like_trainable(const ParameterStore& params);
  const Tensor* find(const ParameterStore& params, std::string_view name) const;
  double global_norm() const;
};

}  // namespace vitplast
