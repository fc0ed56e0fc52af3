#pragma once

#include <deque>
#include <vector>

#include "cda/matrix.hpp"
#include "cda/model.hpp"

namespace cda {

// Fixed-capacity FIFO of detached source features. Gives the discrepancy a
// view of a source domain that does not shrink with the mini-batch size.
class FeatureQueue {
 public:
  FeatureQueue() = default;
  FeatureQueue(int capacity, int source_id)
      : capacity_(capacity), source_id_(source_id) {
    require(capacity >= 1, "FeatureQueue: capacity must be positive");
    require(source_id == 1 || source_id == 2, "FeatureQueue: source_id must be 1 or 2");
  }

  int capacity() const { return capacity_; }
  int source_id() const { return source_id_; }
  int size() const { return static_cast<int>(entries_.size()); }
  bool empty() const { return entries_.empty(); }

  const std::vector<double>& entry(int i) const { return entries_[static_cast<std::size_t>(i)]; }

 private:
  int capacity_ = 0;
  int source_id_ = 0;
  std::deque<std::vector<double>> entries_;  // oldest first

  friend void enqueue(FeatureQueue&, const FeatureBatch&);
};

inline Origin origin_of_source(int source_id) {
  return source_id == 1 ? Origin::source_1 : Origin::source_2;
}

// Appends the batch rows in order as detached copies, evicting the oldest
// rows beyond capacity.
inline void enqueue(FeatureQueue& q, const FeatureBatch& batch) {
  require_contract(batch.origin == origin_of_source(q.source_id()),
                   "enqueue: batch origin does not match queue source");
  require(batch.features.rows <= q.capacity(), "enqueue: batch larger than queue capacity");
  for (int i = 0; i < batch.features.rows; ++i) {
    auto r = batch.features.row(i);
    q.entries_.emplace_back(r.begin(), r.end());
  }
  while (static_cast<int>(q.entries_.size()) > q.capacity()) q.entries_.pop_front();
}

// Detached batch of the max_rows most recent entries (all entries when
// max_rows <= 0), preserving push order. Never mutates the queue.
inline FeatureBatch snapshot(const FeatureQueue& q, int max_rows = 0) {
  if (q.empty()) throw EmptyQueueError("snapshot: queue is empty");
  int take = q.size();
  if (max_rows > 0) take = std::min(take, max_rows);
  int first = q.size() - take;
  int dim = static_cast<int>(q.entry(0).size());
  FeatureBatch out;
  out.features = Matrix(take, dim);
  for (int i = 0; i < take; ++i) {
    const auto& e = q.entry(first + i);
    std::copy(e.begin(), e.end(), out.features.row(i).begin());
  }
  out.origin = origin_of_source(q.source_id());
  out.detached = true;
  return out;
}

}  // namespace cda
