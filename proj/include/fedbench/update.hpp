#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include "fedbench/params.hpp"

namespace fedbench {

/// One client's contribution for a round. `truth_is_malicious` is ground
/// truth for scoring only; defenses see UpdateView, which does not carry it.
struct ClientUpdate {
  int client_id = 0;
  ParamVector delta;  // theta_local - theta_global
  std::int64_t declared_num_samples = 0;
  std::int64_t train_wall_ms = 0;
  bool truth_is_malicious = false;
};

/// What a defense is allowed to see of a ClientUpdate.
class UpdateView {
 public:
  UpdateView(int client_id, const ParamVector& delta, std::int64_t declared_num_samples,
             std::int64_t train_wall_ms)
      : client_id_(client_id),
        delta_(&delta),
        declared_num_samples_(declared_num_samples),
        train_wall_ms_(train_wall_ms) {}

  explicit UpdateView(const ClientUpdate& u)
      : UpdateView(u.client_id, u.delta, u.declared_num_samples, u.train_wall_ms) {}

  int client_id() const { return client_id_; }
  const ParamVector& delta() const { return *delta_; }
  std::int64_t declared_num_samples() const { return declared_num_samples_; }
  std::int64_t train_wall_ms() const { return train_wall_ms_; }

 private:
  int client_id_;
  const ParamVector* delta_;
  std::int64_t declared_num_samples_;
  std::int64_t train_wall_ms_;
};

inline std::vector<UpdateView> project(std::span<const ClientUpdate> updates) {
  std::vector<UpdateView> out;
  out.reserve(updates.size());
  for (const auto& u : updates) out.emplace_back(u);
  return out;
}

}  // namespace fedbench
