#include "tsph/transport.hpp"

#include <algorithm>

namespace tsph::exchange {

void LoopbackTransport::send(int, int dst, Bytes bytes) {
  count(bytes);
  std::lock_guard lock(mu_);
  queues_[dst].push_back(std::move(bytes));
}

std::vector<Bytes> LoopbackTransport::poll(int dst) {
  std::lock_guard lock(mu_);
  auto it = queues_.find(dst);
  if (it == queues_.end()) return {};
  return std::exchange(it->second, {});
}

DelayTransport::DelayTransport(std::chrono::microseconds min_delay, std::chrono::microseconds max_delay,
                               std::uint64_t seed)
    : min_(min_delay), max_(std::max(min_delay, max_delay)), rng_(seed) {}

void DelayTransport::send(int, int dst, Bytes bytes) {
  count(bytes);
  std::lock_guard lock(mu_);
  auto delay = min_;
  if (max_ > min_) {
    std::uniform_int_distribution<std::int64_t> d(min_.count(), max_.count());
    delay = std::chrono::microseconds(d(rng_));
  }
  queues_[dst].push_back({Clock::now() + delay, seq_++, std::move(bytes)});
}

std::vector<Bytes> DelayTransport::poll(int dst) {
  std::vector<InFlight> ready;
  {
    std::lock_guard lock(mu_);
    auto it = queues_.find(dst);
    if (it == queues_.end()) return {};
    const auto now = Clock::now();
    auto& q = it->second;
    auto mid = std::stable_partition(q.begin(), q.end(), [&](const InFlight& m) { return m.due > now; });
    ready.assign(std::make_move_iterator(mid), std::make_move_iterator(q.end()));
    q.erase(mid, q.end());
  }
  std::sort(ready.begin(), ready.end(), [](const InFlight& a, const InFlight& b) {
    return a.due != b.due ? a.due < b.due : a.seq < b.seq;
  });
  std::vector<Bytes> out;
  out.reserve(ready.size());
  for (auto& m : ready) out.push_back(std::move(m.bytes));
  return out;
}

ReorderTransport::ReorderTransport(std::size_t batch, std::chrono::microseconds max_hold)
    : batch_(std::max<std::size_t>(batch, 1)), max_hold_(max_hold) {}

void ReorderTransport::send(int, int dst, Bytes bytes) {
  count(bytes);
  std::lock_guard lock(mu_);
  auto& h = held_[dst];
  if (h.msgs.empty()) h.first = std::chrono::steady_clock::now();
  h.msgs.push_back(std::move(bytes));
}

std::vector<Bytes> ReorderTransport::poll(int dst) {
  std::lock_guard lock(mu_);
  auto it = held_.find(dst);
  if (it == held_.end() || it->second.msgs.empty()) return {};
  auto& h = it->second;
  if (h.msgs.size() < batch_ && std::chrono::steady_clock::now() - h.first < max_hold_) return {};
  std::vector<Bytes> out = std::exchange(h.msgs, {});
  std::reverse(out.begin(), out.end());
  return out;
}

DuplicatingTransport::DuplicatingTransport(std::shared_ptr<Transport> inner, int every)
    : inner_(std::move(inner)), every_(std::max(every, 1)) {}

void DuplicatingTransport::send(int src, int dst, Bytes bytes) {
  count(bytes);
  if (n_.fetch_add(1) % every_ == every_ - 1) inner_->send(src, dst, bytes);
  inner_->send(src, dst, std::move(bytes));
}

std::vector<Bytes> DuplicatingTransport::poll(int dst) { return inner_->poll(dst); }

}  // namespace tsph::exchange
