#include "oklab/transport.hpp"

#include <stdexcept>

#include "oklab/errors.hpp"

namespace oklab {

const char* phase_name(Phase p) {
  switch (p) {
    case Phase::split: return "split";
    case Phase::balance: return "balance";
    case Phase::allgatherv: return "allgatherv";
    case Phase::consensus: return "consensus";
    case Phase::dense: return "dense";
    case Phase::gather: return "gather";
  }
  return "?";
}

TrafficLedger::TrafficLedger(int world) : world_(world), rows_(world) {
  if (world < 1) throw std::invalid_argument("TrafficLedger: world must be >= 1");
}

void TrafficLedger::on_send(int rank, Phase phase, std::size_t payload_words) {
  Counters& c = rows_[rank][static_cast<int>(phase)];
  c.words_sent += payload_words;
  c.msgs_sent += 1;
}

void TrafficLedger::on_recv(int rank, Phase phase, std::size_t payload_words) {
  Counters& c = rows_[rank][static_cast<int>(phase)];
  c.words_recv += payload_words;
  c.msgs_recv += 1;
}

const TrafficLedger::Counters& TrafficLedger::at(int rank, Phase phase) const {
  return rows_[rank][static_cast<int>(phase)];
}

std::uint64_t TrafficLedger::words_recv(int rank,
                                        std::initializer_list<Phase> phases) const {
  std::uint64_t total = 0;
  for (Phase p : phases) total += at(rank, p).words_recv;
  return total;
}

std::uint64_t TrafficLedger::words_sent(int rank,
                                        std::initializer_list<Phase> phases) const {
  std::uint64_t total = 0;
  for (Phase p : phases) total += at(rank, p).words_sent;
  return total;
}

std::uint64_t TrafficLedger::total_sent(Phase phase) const {
  std::uint64_t total = 0;
  for (int r = 0; r < world_; ++r) total += at(r, phase).words_sent;
  return total;
}

std::uint64_t TrafficLedger::total_recv(Phase phase) const {
  std::uint64_t total = 0;
  for (int r = 0; r < world_; ++r) total += at(r, phase).words_recv;
  return total;
}

void TrafficLedger::reset() {
  for (auto& row : rows_) row.fill(Counters{});
}

void WorkerCtx::send(int dst, Phase phase, Message msg) const {
  if (dst == rank) {
    throw std::invalid_argument("WorkerCtx::send: a rank never messages itself");
  }
  if (dst < 0 || dst >= world) {
    throw std::invalid_argument("WorkerCtx::send: destination out of range");
  }
  std::size_t words = msg.payload_words();
  transport->send(rank, dst, phase, std::move(msg));
  ledger->on_send(rank, phase, words);
}

Message WorkerCtx::recv(int src, Phase phase) const {
  if (src == rank) {
    throw std::invalid_argument("WorkerCtx::recv: a rank never messages itself");
  }
  if (src < 0 || src >= world) {
    throw std::invalid_argument("WorkerCtx::recv: source out of range");
  }
  Message msg = transport->recv(rank, src, phase);
  ledger->on_recv(rank, phase, msg.payload_words());
  return msg;
}

bool is_pow2(int v) { return v >= 1 && (v & (v - 1)) == 0; }

int log2_pow2(int p) {
  int l = 0;
  while ((1 << l) < p) ++l;
  return l;
}

std::vector<double> small_allreduce_avg(const WorkerCtx& ctx,
                                        std::vector<double> vec) {
  if (!is_pow2(ctx.world)) {
    throw ConfigError("small_allreduce_avg: world size must be a power of two");
  }
  const int rounds = log2_pow2(ctx.world);
  for (int j = 0; j < rounds; ++j) {
    int partner = ctx.rank ^ (1 << j);
    Message out;
    out.reals = vec;
    ctx.send(partner, Phase::consensus, std::move(out));
    Message in = ctx.recv(partner, Phase::consensus);
    if (in.reals.size() != vec.size()) {
      throw ProtocolError("small_allreduce_avg: mismatched vector lengths");
    }
    // Canonical operand order (lower-rank block first) keeps the sum
    // bit-identical on every rank.
    if (partner < ctx.rank) {
      for (std::size_t i = 0; i < vec.size(); ++i) vec[i] = in.reals[i] + vec[i];
    } else {
      for (std::size_t i = 0; i < vec.size(); ++i) vec[i] = vec[i] + in.reals[i];
    }
  }
  for (double& v : vec) v /= static_cast<double>(ctx.world);
  return vec;
}

std::vector<std::uint32_t> small_allgather_u32(
    const WorkerCtx& ctx, const std::vector<std::uint32_t>& mine, Phase phase) {
  if (!is_pow2(ctx.world)) {
    throw ConfigError("small_allgather_u32: world size must be a power of two");
  }
  const std::size_t stride = mine.size();
  const int P = ctx.world;
  std::vector<std::uint32_t> all(stride * static_cast<std::size_t>(P));
  std::copy(mine.begin(), mine.end(),
            all.begin() + stride * static_cast<std::size_t>(ctx.rank));

  const int rounds = log2_pow2(P);
  for (int j = 0; j < rounds; ++j) {
    int width = 1 << j;
    int partner = ctx.rank ^ width;
    int my_base = ctx.rank & ~(width - 1);
    int partner_base = partner & ~(width - 1);

    Message out;
    out.ints.assign(all.begin() + stride * static_cast<std::size_t>(my_base),
                    all.begin() + stride * static_cast<std::size_t>(my_base + width));
    ctx.send(partner, phase, std::move(out));
    Message in = ctx.recv(partner, phase);
    if (in.ints.size() != stride * static_cast<std::size_t>(width)) {
      throw ProtocolError("small_allgather_u32: mismatched block size");
    }
    std::copy(in.ints.begin(), in.ints.end(),
              all.begin() + stride * static_cast<std::size_t>(partner_base));
  }
  return all;
}

}  // namespace oklab
