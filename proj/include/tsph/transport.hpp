#pragma once

#include <atomic>
#include <chrono>
#include <cstdint>
#include <map>
#include <memory>
#include <mutex>
#include <random>
#include <vector>

namespace tsph::exchange {

using Bytes = std::vector<std::uint8_t>;

// Non-blocking point-to-point channel between simulated ranks. Messages are
// never lost, duplicated or corrupted, but distinct messages may be delivered
// in any order. send and poll are safe to call from any thread.
class Transport {
 public:
  virtual ~Transport() = default;
  virtual void send(int src, int dst, Bytes bytes) = 0;
  // Messages delivered to `dst` since the last poll; possibly none.
  virtual std::vector<Bytes> poll(int dst) = 0;

  std::int64_t messages_sent() const { return messages_.load(); }
  std::int64_t bytes_sent() const { return bytes_.load(); }

 protected:
  void count(const Bytes& b) {
    messages_.fetch_add(1);
    bytes_.fetch_add(static_cast<std::int64_t>(b.size()));
  }

 private:
  std::atomic<std::int64_t> messages_{0};
  std::atomic<std::int64_t> bytes_{0};
};

// Immediate in-order delivery.
class LoopbackTransport : public Transport {
 public:
  void send(int src, int dst, Bytes bytes) override;
  std::vector<Bytes> poll(int dst) override;

 private:
  std::mutex mu_;
  std::map<int, std::vector<Bytes>> queues_;
};

// Each message becomes visible after a delay drawn uniformly from
// [min_delay, max_delay]; equal bounds give a fixed latency.
class DelayTransport : public Transport {
 public:
  using Clock = std::chrono::steady_clock;
  DelayTransport(std::chrono::microseconds min_delay, std::chrono::microseconds max_delay, std::uint64_t seed);

  void send(int src, int dst, Bytes bytes) override;
  std::vector<Bytes> poll(int dst) override;

 private:
  struct InFlight {
    Clock::time_point due;
    std::uint64_t seq;
    Bytes bytes;
  };
  std::chrono::microseconds min_, max_;
  std::mutex mu_;
  std::mt19937_64 rng_;
  std::uint64_t seq_ = 0;
  std::map<int, std::vector<InFlight>> queues_;
};

// Holds messages per destination until `batch` have accumulated (or the
// oldest has waited `max_hold`) and then releases them in reverse send order.
class ReorderTransport : public Transport {
 public:
  ReorderTransport(std::size_t batch, std::chrono::microseconds max_hold);

  void send(int src, int dst, Bytes bytes) override;
  std::vector<Bytes> poll(int dst) override;

 private:
  struct Held {
    std::chrono::steady_clock::time_point first;
    std::vector<Bytes> msgs;
  };
  std::size_t batch_;
  std::chrono::microseconds max_hold_;
  std::mutex mu_;
  std::map<int, Held> held_;
};

// Test transport that breaks the contract: every `every`-th message is
// delivered twice.
class DuplicatingTransport : public Transport {
 public:
  DuplicatingTransport(std::shared_ptr<Transport> inner, int every);

  void send(int src, int dst, Bytes bytes) override;
  std::vector<Bytes> poll(int dst) override;

 private:
  std::shared_ptr<Transport> inner_;
  int every_;
  std::atomic<int> n_{0};
};

}  // namespace tsph::exchange
