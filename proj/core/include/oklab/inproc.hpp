#pragma once

#include <atomic>
#include <condition_variable>
#include <deque>
#include <functional>
#include <memory>
#include <mutex>

#include "oklab/transport.hpp"

namespace oklab {

/** In-process transport: one bounded FIFO channel per (src, dst) pair with
 *  per-tag sub-queues. Worker ranks run as threads of the same process.
 *
 *  send() enqueues without blocking unless the channel already holds
 *  `capacity` messages; the bound keeps protocols honest about deadlock
 *  freedom instead of hiding behind infinite buffering. close() wakes every
 *  blocked sender/receiver with a TransportError.
 */
class InprocTransport : public Transport {
 public:
  struct LogEntry {
    int src;
    int dst;
    Phase phase;
    std::size_t payload_words;
    std::uint64_t src_seq;  // per-source send order
  };

  explicit InprocTransport(int world, std::size_t capacity = 64);
  ~InprocTransport() override;

  int world() const override { return world_; }
  void send(int src, int dst, Phase phase, Message msg) override;
  Message recv(int dst, int src, Phase phase) override;
  void close() override;

  /** Records every send (in per-source order) for structural tests. */
  void enable_message_log();
  std::vector<LogEntry> message_log() const;

  /** Test hook: called before each send/recv enqueue-dequeue; used to inject
   *  seeded delays that perturb thread interleavings. */
  void set_delay_hook(std::function<void(int src, int dst, Phase)> hook);

 private:
  struct Channel {
    std::mutex mu;
    std::condition_variable cv;
    std::deque<Message> queues[kPhaseCount];
    std::size_t total = 0;
  };

  Channel& channel(int src, int dst) {
    return *channels_[static_cast<std::size_t>(src) * world_ + dst];
  }

  int world_;
  std::size_t capacity_;
  std::atomic<bool> closed_{false};
  std::vector<std::unique_ptr<Channel>> channels_;

  mutable std::mutex log_mu_;
  std::atomic<bool> logging_{false};
  std::vector<LogEntry> log_;
  std::vector<std::uint64_t> send_seq_;

  std::function<void(int, int, Phase)> delay_hook_;
};

}  // namespace oklab
