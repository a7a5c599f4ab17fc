#include "oklab/tcp.hpp"

#include <arpa/inet.h>
#include <fcntl.h>
#include <netinet/in.h>
#include <netinet/tcp.h>
#include <poll.h>
#include <sys/socket.h>
#include <unistd.h>

#include <algorithm>
#include <bit>
#include <cerrno>
#include <cstring>
#include <fstream>
#include <sstream>

#include "oklab/errors.hpp"

namespace oklab {

std::vector<RankMapEntry> parse_rank_map(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("rank map: cannot open " + path);
  std::vector<RankMapEntry> entries;
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    std::string trimmed = line;
    auto first = trimmed.find_first_not_of(" \t\r");
    if (first == std::string::npos || trimmed[first] == '#') continue;
    std::istringstream ls(trimmed);
    int rank = -1;
    std::string addr;
    if (!(ls >> rank >> addr) || rank < 0) {
      throw ConfigError("rank map: malformed line " + std::to_string(lineno));
    }
    auto colon = addr.rfind(':');
    if (colon == std::string::npos || colon == 0 || colon + 1 == addr.size()) {
      throw ConfigError("rank map: expected host:port on line " +
                        std::to_string(lineno));
    }
    unsigned long port = 0;
    try {
      port = std::stoul(addr.substr(colon + 1));
    } catch (const std::exception&) {
      throw ConfigError("rank map: bad port on line " + std::to_string(lineno));
    }
    if (port == 0 || port > 65535) {
      throw ConfigError("rank map: bad port on line " + std::to_string(lineno));
    }
    entries.push_back(RankMapEntry{rank, addr.substr(0, colon),
                                   static_cast<std::uint16_t>(port)});
  }
  if (entries.empty()) throw ConfigError("rank map: no entries in " + path);
  std::vector<bool> seen(entries.size(), false);
  for (const auto& e : entries) {
    if (e.rank >= static_cast<int>(entries.size()) || seen[e.rank]) {
      throw ConfigError("rank map: ranks must be 0..P-1, each exactly once");
    }
    seen[e.rank] = true;
  }
  std::sort(entries.begin(), entries.end(),
            [](const RankMapEntry& a, const RankMapEntry& b) {
              return a.rank < b.rank;
            });
  return entries;
}

namespace {

void put_u32(std::vector<std::uint8_t>& out, std::uint32_t w) {
  out.push_back(static_cast<std::uint8_t>(w & 0xff));
  out.push_back(static_cast<std::uint8_t>((w >> 8) & 0xff));
  out.push_back(static_cast<std::uint8_t>((w >> 16) & 0xff));
  out.push_back(static_cast<std::uint8_t>((w >> 24) & 0xff));
}

void put_u64(std::vector<std::uint8_t>& out, std::uint64_t w) {
  for (int i = 0; i < 8; ++i) {
    out.push_back(static_cast<std::uint8_t>((w >> (8 * i)) & 0xff));
  }
}

std::uint32_t get_u32(const std::uint8_t* p) {
  return static_cast<std::uint32_t>(p[0]) |
         (static_cast<std::uint32_t>(p[1]) << 8) |
         (static_cast<std::uint32_t>(p[2]) << 16) |
         (static_cast<std::uint32_t>(p[3]) << 24);
}

std::uint64_t get_u64(const std::uint8_t* p) {
  std::uint64_t w = 0;
  for (int i = 0; i < 8; ++i) w |= static_cast<std::uint64_t>(p[i]) << (8 * i);
  return w;
}

// Frame body: [phase u8][meta_n u32][ints_n u32][reals_n u32][meta][ints][reals f64].
std::vector<std::uint8_t> encode_frame(Phase phase, const Message& msg) {
  std::vector<std::uint8_t> body;
  body.reserve(13 + 4 * (msg.meta.size() + msg.ints.size()) + 8 * msg.reals.size());
  body.push_back(static_cast<std::uint8_t>(phase));
  put_u32(body, static_cast<std::uint32_t>(msg.meta.size()));
  put_u32(body, static_cast<std::uint32_t>(msg.ints.size()));
  put_u32(body, static_cast<std::uint32_t>(msg.reals.size()));
  for (std::uint32_t w : msg.meta) put_u32(body, w);
  for (std::uint32_t w : msg.ints) put_u32(body, w);
  for (double v : msg.reals) put_u64(body, std::bit_cast<std::uint64_t>(v));

  std::vector<std::uint8_t> frame;
  frame.reserve(4 + body.size());
  put_u32(frame, static_cast<std::uint32_t>(body.size()));
  frame.insert(frame.end(), body.begin(), body.end());
  return frame;
}

std::pair<Phase, Message> decode_frame(const std::vector<std::uint8_t>& body) {
  if (body.size() < 13) throw ProtocolError("tcp: truncated frame body");
  Phase phase = static_cast<Phase>(body[0]);
  if (body[0] >= kPhaseCount) throw ProtocolError("tcp: bad phase tag");
  std::uint32_t meta_n = get_u32(&body[1]);
  std::uint32_t ints_n = get_u32(&body[5]);
  std::uint32_t reals_n = get_u32(&body[9]);
  std::size_t expect = 13 + 4 * (std::size_t{meta_n} + ints_n) + 8 * std::size_t{reals_n};
  if (body.size() != expect) throw ProtocolError("tcp: frame length mismatch");
  Message msg;
  msg.meta.reserve(meta_n);
  msg.ints.reserve(ints_n);
  msg.reals.reserve(reals_n);
  std::size_t off = 13;
  for (std::uint32_t i = 0; i < meta_n; ++i, off += 4) msg.meta.push_back(get_u32(&body[off]));
  for (std::uint32_t i = 0; i < ints_n; ++i, off += 4) msg.ints.push_back(get_u32(&body[off]));
  for (std::uint32_t i = 0; i < reals_n; ++i, off += 8) {
    msg.reals.push_back(std::bit_cast<double>(get_u64(&body[off])));
  }
  return {phase, std::move(msg)};
}

void set_nonblocking(int fd) {
  int flags = fcntl(fd, F_GETFL, 0);
  fcntl(fd, F_SETFL, flags | O_NONBLOCK);
}

int checked(int rc, const char* what) {
  if (rc < 0) {
    throw TransportError(std::string("tcp: ") + what + ": " + std::strerror(errno));
  }
  return rc;
}

sockaddr_in resolve(const RankMapEntry& e) {
  sockaddr_in addr{};
  addr.sin_family = AF_INET;
  addr.sin_port = htons(e.port);
  if (inet_pton(AF_INET, e.host.c_str(), &addr.sin_addr) != 1) {
    throw ConfigError("rank map: host must be an IPv4 address, got " + e.host);
  }
  return addr;
}

void write_all_blocking(int fd, const std::uint8_t* data, std::size_t len) {
  std::size_t done = 0;
  while (done < len) {
    ssize_t n = ::write(fd, data + done, len - done);
    if (n < 0) {
      if (errno == EINTR) continue;
      throw TransportError(std::string("tcp: write: ") + std::strerror(errno));
    }
    done += static_cast<std::size_t>(n);
  }
}

void read_all_blocking(int fd, std::uint8_t* data, std::size_t len) {
  std::size_t done = 0;
  while (done < len) {
    ssize_t n = ::read(fd, data + done, len - done);
    if (n == 0) throw TransportError("tcp: peer closed during setup");
    if (n < 0) {
      if (errno == EINTR) continue;
      throw TransportError(std::string("tcp: read: ") + std::strerror(errno));
    }
    done += static_cast<std::size_t>(n);
  }
}

}  // namespace

TcpTransport::TcpTransport(const std::vector<RankMapEntry>& map)
    : world_(static_cast<int>(map.size())) {
  eps_.resize(world_);
  listeners_.assign(world_, -1);
  for (auto& ep : eps_) {
    ep.out_fd.assign(world_, -1);
    ep.in_fd.assign(world_, -1);
    ep.rd.resize(world_);
    ep.inbox.resize(world_);
  }

  // All ranks are threads of this process, so the whole mesh can be wired up
  // serially: bind+listen every address, then dial every ordered pair.
  for (int r = 0; r < world_; ++r) {
    int fd = checked(::socket(AF_INET, SOCK_STREAM, 0), "socket");
    int one = 1;
    setsockopt(fd, SOL_SOCKET, SO_REUSEADDR, &one, sizeof(one));
    sockaddr_in addr = resolve(map[r]);
    checked(::bind(fd, reinterpret_cast<sockaddr*>(&addr), sizeof(addr)), "bind");
    checked(::listen(fd, world_), "listen");
    listeners_[r] = fd;
  }
  for (int src = 0; src < world_; ++src) {
    for (int dst = 0; dst < world_; ++dst) {
      if (src == dst) continue;
      int fd = checked(::socket(AF_INET, SOCK_STREAM, 0), "socket");
      sockaddr_in addr = resolve(map[dst]);
      checked(::connect(fd, reinterpret_cast<sockaddr*>(&addr), sizeof(addr)),
              "connect");
      int one = 1;
      setsockopt(fd, IPPROTO_TCP, TCP_NODELAY, &one, sizeof(one));
      std::uint8_t hello[4];
      hello[0] = static_cast<std::uint8_t>(src & 0xff);
      hello[1] = static_cast<std::uint8_t>((src >> 8) & 0xff);
      hello[2] = static_cast<std::uint8_t>((src >> 16) & 0xff);
      hello[3] = static_cast<std::uint8_t>((src >> 24) & 0xff);
      write_all_blocking(fd, hello, 4);
      eps_[src].out_fd[dst] = fd;

      int in = checked(::accept(listeners_[dst], nullptr, nullptr), "accept");
      std::uint8_t peer[4];
      read_all_blocking(in, peer, 4);
      int from = static_cast<int>(get_u32(peer));
      if (from < 0 || from >= world_ || from == dst ||
          eps_[dst].in_fd[from] != -1) {
        throw ProtocolError("tcp: unexpected hello during setup");
      }
      setsockopt(in, IPPROTO_TCP, TCP_NODELAY, &one, sizeof(one));
      eps_[dst].in_fd[from] = in;
    }
  }
  for (int r = 0; r < world_; ++r) {
    for (int o = 0; o < world_; ++o) {
      if (eps_[r].out_fd[o] >= 0) set_nonblocking(eps_[r].out_fd[o]);
      if (eps_[r].in_fd[o] >= 0) set_nonblocking(eps_[r].in_fd[o]);
    }
  }
}

TcpTransport::~TcpTransport() {
  close();
  for (int fd : listeners_) {
    if (fd >= 0) ::close(fd);
  }
  for (auto& ep : eps_) {
    for (int fd : ep.out_fd) {
      if (fd >= 0) ::close(fd);
    }
    for (int fd : ep.in_fd) {
      if (fd >= 0) ::close(fd);
    }
  }
}

void TcpTransport::close() {
  bool expected = false;
  if (!closed_.compare_exchange_strong(expected, true)) return;
  for (auto& ep : eps_) {
    for (int fd : ep.out_fd) {
      if (fd >= 0) ::shutdown(fd, SHUT_RDWR);
    }
    for (int fd : ep.in_fd) {
      if (fd >= 0) ::shutdown(fd, SHUT_RDWR);
    }
  }
}

// Reads whatever is available on (rank <- src); returns false on EOF.
bool TcpTransport::pump_socket(int rank, int src) {
  Endpoint& ep = eps_[rank];
  ReadState& rs = ep.rd[src];
  int fd = ep.in_fd[src];
  for (;;) {
    std::size_t have = rs.buf.size();
    rs.buf.resize(rs.need);
    ssize_t n = ::read(fd, rs.buf.data() + have, rs.need - have);
    if (n == 0) return false;
    if (n < 0) {
      rs.buf.resize(have);
      if (errno == EAGAIN || errno == EWOULDBLOCK) return true;
      if (errno == EINTR) continue;
      throw TransportError(std::string("tcp: read: ") + std::strerror(errno));
    }
    rs.buf.resize(have + static_cast<std::size_t>(n));
    if (rs.buf.size() < rs.need) continue;
    if (!rs.have_len) {
      std::uint32_t len = get_u32(rs.buf.data());
      if (len < 13) throw ProtocolError("tcp: bad frame length");
      rs.buf.clear();
      rs.need = len;
      rs.have_len = true;
    } else {
      auto [phase, msg] = decode_frame(rs.buf);
      ep.inbox[src][static_cast<int>(phase)].push_back(std::move(msg));
      rs.buf.clear();
      rs.need = 4;
      rs.have_len = false;
    }
  }
}

void TcpTransport::drain_ready(int rank, int timeout_ms) {
  Endpoint& ep = eps_[rank];
  std::vector<pollfd> fds;
  std::vector<int> srcs;
  for (int s = 0; s < world_; ++s) {
    if (ep.in_fd[s] >= 0) {
      fds.push_back(pollfd{ep.in_fd[s], POLLIN, 0});
      srcs.push_back(s);
    }
  }
  if (fds.empty()) return;
  int rc = ::poll(fds.data(), fds.size(), timeout_ms);
  if (rc < 0) {
    if (errno == EINTR) return;
    throw TransportError(std::string("tcp: poll: ") + std::strerror(errno));
  }
  for (std::size_t i = 0; i < fds.size(); ++i) {
    if (fds[i].revents & (POLLIN | POLLHUP | POLLERR)) {
      if (!pump_socket(rank, srcs[i]) && !closed_.load()) {
        throw TransportError("tcp: peer closed connection");
      }
    }
  }
}

void TcpTransport::send(int src, int dst, Phase phase, Message msg) {
  if (closed_.load()) throw TransportError("send on closed transport");
  std::vector<std::uint8_t> frame = encode_frame(phase, msg);
  Endpoint& ep = eps_[src];
  int fd = ep.out_fd[dst];
  std::size_t done = 0;
  while (done < frame.size()) {
    ssize_t n = ::send(fd, frame.data() + done, frame.size() - done, MSG_NOSIGNAL);
    if (n > 0) {
      done += static_cast<std::size_t>(n);
      continue;
    }
    if (n < 0 && (errno == EAGAIN || errno == EWOULDBLOCK)) {
      // Outbound buffer full: keep consuming inbound traffic so a pair of
      // ranks pushing large frames at each other cannot wedge.
      drain_ready(src, 10);
      if (closed_.load()) throw TransportError("send on closed transport");
      continue;
    }
    if (n < 0 && errno == EINTR) continue;
    if (closed_.load()) throw TransportError("send on closed transport");
    throw TransportError(std::string("tcp: send: ") +
                         (n < 0 ? std::strerror(errno) : "short write"));
  }
}

Message TcpTransport::recv(int dst, int src, Phase phase) {
  Endpoint& ep = eps_[dst];
  auto& q = ep.inbox[src][static_cast<int>(phase)];
  while (q.empty()) {
    if (closed_.load()) throw TransportError("recv on closed transport");
    drain_ready(dst, 100);
  }
  Message out = std::move(q.front());
  q.pop_front();
  return out;
}

}  // namespace oklab
