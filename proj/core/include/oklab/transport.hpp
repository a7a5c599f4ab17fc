#pragma once

#include <array>
#include <cstdint>
#include <memory>
#include <string>
#include <vector>

#include "oklab/sparse.hpp"

namespace oklab {

/** Communication phases. Every message carries exactly one of these tags;
 *  the ledger and the metrics output are keyed by them. */
enum class Phase : std::uint8_t {
  split = 0,       // split-and-reduce slice exchange
  balance = 1,     // data-balancing moves
  allgatherv = 2,  // variable-size allgather of selected data
  consensus = 3,   // small metadata collectives (sizes, boundaries)
  dense = 4,       // dense reduce-scatter/allgather traffic
  gather = 5,      // threshold-refresh gather of reduced regions
};

inline constexpr int kPhaseCount = 6;

const char* phase_name(Phase p);

/** A transported message.
 *
 *  `ints` and `reals` are payload: every index and every value counts as one
 *  32-bit word in the ledger (values travel at full precision in-memory and
 *  on the TCP backend, but are *accounted* one word each, matching the
 *  "k values plus k indexes = 2k words" convention). `meta` is per-message
 *  structural metadata (entry counts, part layout); it is not payload and is
 *  accounted through the message count, i.e. the alpha term.
 */
struct Message {
  std::vector<std::uint32_t> meta;
  std::vector<Index> ints;
  std::vector<double> reals;

  std::size_t payload_words() const { return ints.size() + reals.size(); }
};

/** Per-rank, per-phase traffic counters.
 *
 *  Each rank updates only its own row (senders credit their sent counters,
 *  receivers their received counters), so no synchronization is needed while
 *  workers run; rows are read after workers quiesce. Conservation — total
 *  sent == total received per phase — holds at quiescence.
 */
class TrafficLedger {
 public:
  struct Counters {
    std::uint64_t words_sent = 0;
    std::uint64_t words_recv = 0;
    std::uint64_t msgs_sent = 0;
    std::uint64_t msgs_recv = 0;
  };

  explicit TrafficLedger(int world);

  int world() const { return world_; }

  void on_send(int rank, Phase phase, std::size_t payload_words);
  void on_recv(int rank, Phase phase, std::size_t payload_words);

  const Counters& at(int rank, Phase phase) const;

  /** Sum of words received by `rank` over the given phases. */
  std::uint64_t words_recv(int rank, std::initializer_list<Phase> phases) const;
  std::uint64_t words_sent(int rank, std::initializer_list<Phase> phases) const;

  /** Total sent/received over all ranks for one phase (conservation checks). */
  std::uint64_t total_sent(Phase phase) const;
  std::uint64_t total_recv(Phase phase) const;

  void reset();

 private:
  int world_;
  std::vector<std::array<Counters, kPhaseCount>> rows_;
};

/** Abstract point-to-point transport between P ranks.
 *
 *  Messages are matched by (source, destination, phase tag) and delivered
 *  FIFO per (source, destination, tag) triple. Backends do not touch the
 *  ledger; accounting happens in WorkerCtx.
 */
class Transport {
 public:
  virtual ~Transport() = default;

  virtual int world() const = 0;

  /** Enqueues a message. Blocks only when the backend's bounded channel to
   *  `dst` is full. Throws TransportError after close(). */
  virtual void send(int src, int dst, Phase phase, Message msg) = 0;

  /** Blocks until a message from `src` with tag `phase` arrives.
   *  Throws TransportError if the transport is closed while waiting. */
  virtual Message recv(int dst, int src, Phase phase) = 0;

  /** Unblocks all pending operations; subsequent sends/recvs throw. */
  virtual void close() = 0;
};

/** One worker's view of a run: its rank, the shared transport, and the
 *  shared ledger. All collective algorithms take a WorkerCtx per rank. */
struct WorkerCtx {
  int rank = 0;
  int world = 1;
  Transport* transport = nullptr;
  TrafficLedger* ledger = nullptr;

  /** Accounted send. A rank never sends to itself. */
  void send(int dst, Phase phase, Message msg) const;

  /** Accounted receive. */
  Message recv(int src, Phase phase) const;
};

/** Element-wise mean of one real vector per rank via recursive doubling,
 *  tagged Phase::consensus. Every rank returns the identical result
 *  (bit-identical: combination order is canonicalized). World size must be a
 *  power of two. Throws ProtocolError if ranks disagree on vector length. */
std::vector<double> small_allreduce_avg(const WorkerCtx& ctx,
                                        std::vector<double> vec);

/** Allgather of a fixed-length u32 vector per rank via recursive doubling,
 *  result ordered by rank, tagged `phase` (defaults to consensus). */
std::vector<std::uint32_t> small_allgather_u32(const WorkerCtx& ctx,
                                               const std::vector<std::uint32_t>& mine,
                                               Phase phase = Phase::consensus);

/** True iff v is a power of two (v >= 1). */
bool is_pow2(int v);

/** ceil(log2(p)) for p >= 1. */
int log2_pow2(int p);

}  // namespace oklab
