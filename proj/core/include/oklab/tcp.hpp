#pragma once

#include <array>
#include <atomic>
#include <cstdint>
#include <deque>
#include <string>
#include <vector>

#include "oklab/transport.hpp"

namespace oklab {

/** One "rank host:port" line per rank. */
struct RankMapEntry {
  int rank;
  std::string host;
  std::uint16_t port;
};

/** Parses a rank map file. Throws ConfigError on malformed lines, duplicate
 *  or missing ranks. */
std::vector<RankMapEntry> parse_rank_map(const std::string& path);

/** TCP transport over one duplex loopback connection per ordered rank pair.
 *
 *  All ranks live in this process; the constructor binds every listed
 *  address, dials every ordered pair, and identifies each inbound connection
 *  with a 4-byte hello. Frames are length-prefixed (4-byte little-endian
 *  count of the bytes that follow). Sends run on nonblocking sockets and
 *  drain inbound frames while the outbound buffer is full, so simultaneous
 *  large exchanges cannot deadlock. Each rank's sockets and inbox are touched
 *  only by that rank's thread.
 */
class TcpTransport : public Transport {
 public:
  explicit TcpTransport(const std::vector<RankMapEntry>& map);
  ~TcpTransport() override;

  int world() const override { return world_; }
  void send(int src, int dst, Phase phase, Message msg) override;
  Message recv(int dst, int src, Phase phase) override;
  void close() override;

 private:
  struct ReadState {
    std::vector<std::uint8_t> buf;
    std::size_t need = 4;
    bool have_len = false;
  };

  struct Endpoint {
    std::vector<int> out_fd;  // indexed by destination rank, -1 at self
    std::vector<int> in_fd;   // indexed by source rank, -1 at self
    std::vector<ReadState> rd;
    std::vector<std::array<std::deque<Message>, kPhaseCount>> inbox;
  };

  void drain_ready(int rank, int timeout_ms);
  bool pump_socket(int rank, int src);

  int world_;
  std::atomic<bool> closed_{false};
  std::vector<Endpoint> eps_;
  std::vector<int> listeners_;
};

}  // namespace oklab
