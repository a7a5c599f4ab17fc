#include "oklab/inproc.hpp"

#include <stdexcept>

#include "oklab/errors.hpp"

namespace oklab {

InprocTransport::InprocTransport(int world, std::size_t capacity)
    : world_(world), capacity_(capacity), send_seq_(world, 0) {
  if (world < 1) throw std::invalid_argument("InprocTransport: world must be >= 1");
  if (capacity < 1) throw std::invalid_argument("InprocTransport: capacity must be >= 1");
  channels_.resize(static_cast<std::size_t>(world) * world);
  for (auto& ch : channels_) ch = std::make_unique<Channel>();
}

InprocTransport::~InprocTransport() { close(); }

void InprocTransport::send(int src, int dst, Phase phase, Message msg) {
  if (delay_hook_) delay_hook_(src, dst, phase);
  std::size_t words = msg.payload_words();
  Channel& ch = channel(src, dst);
  {
    std::unique_lock<std::mutex> lock(ch.mu);
    ch.cv.wait(lock, [&] { return closed_ || ch.total < capacity_; });
    if (closed_) throw TransportError("send on closed transport");
    ch.queues[static_cast<int>(phase)].push_back(std::move(msg));
    ch.total += 1;
  }
  ch.cv.notify_all();
  if (logging_) {
    std::lock_guard<std::mutex> lock(log_mu_);
    log_.push_back(LogEntry{src, dst, phase, words, send_seq_[src]++});
  }
}

Message InprocTransport::recv(int dst, int src, Phase phase) {
  if (delay_hook_) delay_hook_(src, dst, phase);
  Channel& ch = channel(src, dst);
  Message out;
  {
    std::unique_lock<std::mutex> lock(ch.mu);
    auto& q = ch.queues[static_cast<int>(phase)];
    ch.cv.wait(lock, [&] { return closed_ || !q.empty(); });
    if (q.empty()) throw TransportError("recv on closed transport");
    out = std::move(q.front());
    q.pop_front();
    ch.total -= 1;
  }
  ch.cv.notify_all();
  return out;
}

void InprocTransport::close() {
  closed_.store(true);
  for (auto& ch : channels_) {
    // Take and drop each lock so no waiter misses the flag.
    std::lock_guard<std::mutex> lock(ch->mu);
  }
  for (auto& ch : channels_) ch->cv.notify_all();
}

void InprocTransport::enable_message_log() {
  std::lock_guard<std::mutex> lock(log_mu_);
  log_.clear();
  logging_.store(true);
}

std::vector<InprocTransport::LogEntry> InprocTransport::message_log() const {
  std::lock_guard<std::mutex> lock(log_mu_);
  return log_;
}

void InprocTransport::set_delay_hook(
    std::function<void(int src, int dst, Phase)> hook) {
  delay_hook_ = std::move(hook);
}

}  // namespace oklab
