#include <arpa/inet.h>
#include <netinet/in.h>
#include <sys/socket.h>
#include <unistd.h>

#include <atomic>
#include <chrono>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <string>
#include <thread>
#include <vector>

#include "doctest.h"
#include "oklab/collectives.hpp"
#include "oklab/errors.hpp"
#include "oklab/inproc.hpp"
#include "oklab/tcp.hpp"
#include "oklab/transport.hpp"
#include "test_util.hpp"

using namespace oklab;
using oklab::test::World;
using oklab::test::run_ranks;

namespace {

Message words_msg(std::vector<Index> ints, std::vector<double> reals) {
  Message m;
  m.ints = std::move(ints);
  m.reals = std::move(reals);
  return m;
}

std::filesystem::path temp_file(const std::string& stem) {
  return std::filesystem::temp_directory_path() /
         (stem + "." + std::to_string(::getpid()) + ".txt");
}

/** Grabs `count` distinct free loopback ports (all bound at once, then
 *  released — racy in principle, quiet enough in practice). */
std::vector<std::uint16_t> free_ports(int count) {
  std::vector<int> fds;
  std::vector<std::uint16_t> ports;
  for (int i = 0; i < count; ++i) {
    int fd = ::socket(AF_INET, SOCK_STREAM, 0);
    REQUIRE(fd >= 0);
    sockaddr_in addr{};
    addr.sin_family = AF_INET;
    addr.sin_addr.s_addr = htonl(INADDR_LOOPBACK);
    addr.sin_port = 0;
    REQUIRE(::bind(fd, reinterpret_cast<sockaddr*>(&addr), sizeof(addr)) == 0);
    socklen_t len = sizeof(addr);
    REQUIRE(::getsockname(fd, reinterpret_cast<sockaddr*>(&addr), &len) == 0);
    ports.push_back(ntohs(addr.sin_port));
    fds.push_back(fd);
  }
  for (int fd : fds) ::close(fd);
  return ports;
}

std::string write_rank_map(const std::string& stem,
                           const std::vector<std::uint16_t>& ports) {
  std::filesystem::path path = temp_file(stem);
  std::ofstream out(path);
  for (std::size_t r = 0; r < ports.size(); ++r) {
    out << r << " 127.0.0.1:" << ports[r] << "\n";
  }
  out.close();
  return path.string();
}

}  // namespace

TEST_CASE("in-process channels deliver FIFO per phase and match by tag") {
  World w(2);
  auto got = run_ranks(w, [](const WorkerCtx& ctx) -> std::vector<double> {
    if (ctx.rank == 0) {
      ctx.send(1, Phase::split, words_msg({}, {1.0}));
      ctx.send(1, Phase::split, words_msg({}, {2.0}));
      ctx.send(1, Phase::balance, words_msg({}, {3.0}));
      return {};
    }
    // The balance message is retrievable first even though it was sent last:
    // queues are per (source, phase).
    std::vector<double> seen;
    seen.push_back(ctx.recv(0, Phase::balance).reals.at(0));
    seen.push_back(ctx.recv(0, Phase::split).reals.at(0));
    seen.push_back(ctx.recv(0, Phase::split).reals.at(0));
    return seen;
  });
  CHECK(got[1] == std::vector<double>{3.0, 1.0, 2.0});
}

TEST_CASE("the ledger counts payload words and messages, meta rides free") {
  World w(2);
  run_ranks(w, [](const WorkerCtx& ctx) -> int {
    if (ctx.rank == 0) {
      Message m = words_msg({1, 2, 3}, {0.5, 0.25});
      m.meta = {9, 9, 9, 9, 9, 9, 9};  // structural metadata, not payload
      ctx.send(1, Phase::split, std::move(m));
    } else {
      ctx.recv(0, Phase::split);
    }
    return 0;
  });
  const TrafficLedger::Counters& sent = w.ledger.at(0, Phase::split);
  const TrafficLedger::Counters& recv = w.ledger.at(1, Phase::split);
  CHECK(sent.words_sent == 5);  // 3 indexes + 2 values
  CHECK(sent.msgs_sent == 1);
  CHECK(sent.words_recv == 0);
  CHECK(recv.words_recv == 5);
  CHECK(recv.msgs_recv == 1);
  CHECK(w.ledger.total_sent(Phase::split) == w.ledger.total_recv(Phase::split));
  CHECK(w.ledger.words_recv(1, {Phase::split, Phase::balance}) == 5);
  CHECK(w.ledger.words_sent(0, {Phase::split}) == 5);
}

TEST_CASE("close unblocks a waiting receiver with TransportError") {
  InprocTransport tr(2);
  std::atomic<bool> threw{false};
  std::thread blocked([&] {
    try {
      tr.recv(1, 0, Phase::split);
    } catch (const TransportError&) {
      threw = true;
    }
  });
  std::this_thread::sleep_for(std::chrono::milliseconds(20));
  tr.close();
  blocked.join();
  CHECK(threw);
  CHECK_THROWS_AS(tr.send(0, 1, Phase::split, Message{}), TransportError);
  CHECK_THROWS_AS(tr.recv(1, 0, Phase::split), TransportError);
}

TEST_CASE("bounded channels carry long streams without loss or reorder") {
  World w(2, /*capacity=*/1);  // every send beyond the first must wait
  auto got = run_ranks(w, [](const WorkerCtx& ctx) -> std::vector<double> {
    const int count = 200;
    if (ctx.rank == 0) {
      for (int i = 0; i < count; ++i) {
        ctx.send(1, Phase::split, words_msg({}, {static_cast<double>(i)}));
      }
      return {ctx.recv(1, Phase::consensus).reals.at(0)};
    }
    std::vector<double> seen;
    for (int i = 0; i < count; ++i) {
      seen.push_back(ctx.recv(0, Phase::split).reals.at(0));
    }
    ctx.send(0, Phase::consensus, words_msg({}, {-1.0}));
    return seen;
  });
  for (int i = 0; i < 200; ++i) CHECK(got[1][i] == static_cast<double>(i));
  CHECK(got[0] == std::vector<double>{-1.0});
}

TEST_CASE("the message log records sends in per-source order") {
  World w(2);
  w.transport.enable_message_log();
  run_ranks(w, [](const WorkerCtx& ctx) -> int {
    if (ctx.rank == 0) {
      ctx.send(1, Phase::split, words_msg({1}, {}));
      ctx.send(1, Phase::gather, words_msg({1, 2}, {}));
    } else {
      ctx.recv(0, Phase::split);
      ctx.recv(0, Phase::gather);
      ctx.send(0, Phase::balance, words_msg({}, {1.0}));
    }
    if (ctx.rank == 0) ctx.recv(1, Phase::balance);
    return 0;
  });
  auto log = w.transport.message_log();
  REQUIRE(log.size() == 3);
  std::uint64_t seq0 = 0;
  for (const auto& e : log) {
    if (e.src == 0) {
      CHECK(e.src_seq == seq0++);
    }
  }
  CHECK(seq0 == 2);
  CHECK(log[0].payload_words + log[1].payload_words + log[2].payload_words ==
        1 + 2 + 1);
}

TEST_CASE("seeded delays do not change collective results") {
  const std::size_t n = 64;
  std::vector<SparseGrad> baseline;
  {
    World w(4);
    auto got = run_ranks(w, [&](const WorkerCtx& ctx) {
      SparseGrad mine(n);
      for (Index i = 0; i < 3 + static_cast<Index>(ctx.rank); ++i) {
        mine.indices.push_back(static_cast<Index>(ctx.rank) * 10 + i);
        mine.values.push_back(static_cast<double>(ctx.rank + 1) * (i + 1));
      }
      auto parts = sparse_allgatherv(ctx, mine, Phase::allgatherv);
      return sparse_sum(parts, n);
    });
    baseline = got;
  }
  for (std::uint64_t seed = 1; seed <= 3; ++seed) {
    World w(4);
    std::atomic<std::uint64_t> mixer{seed};
    w.transport.set_delay_hook([&](int src, int dst, Phase) {
      std::uint64_t x = mixer.fetch_add(0x9e3779b9u) ^
                        (static_cast<std::uint64_t>(src) << 8) ^
                        static_cast<std::uint64_t>(dst);
      if (splitmix64(x) % 3 == 0) {
        std::this_thread::sleep_for(std::chrono::microseconds(
            splitmix64(x ^ 0xabcd) % 300));
      }
    });
    auto got = run_ranks(w, [&](const WorkerCtx& ctx) {
      SparseGrad mine(n);
      for (Index i = 0; i < 3 + static_cast<Index>(ctx.rank); ++i) {
        mine.indices.push_back(static_cast<Index>(ctx.rank) * 10 + i);
        mine.values.push_back(static_cast<double>(ctx.rank + 1) * (i + 1));
      }
      auto parts = sparse_allgatherv(ctx, mine, Phase::allgatherv);
      return sparse_sum(parts, n);
    });
    for (int r = 0; r < 4; ++r) {
      CHECK(oklab::test::same_sparse(got[r], baseline[r]));
    }
  }
}

TEST_CASE("rank map parsing accepts the documented format") {
  auto path = temp_file("rankmap_ok");
  {
    std::ofstream out(path);
    out << "# comment-free format: rank host:port\n";
  }
  // Malformed: the comment line is not "rank host:port".
  CHECK_THROWS_AS(parse_rank_map(path.string()), ConfigError);
  {
    std::ofstream out(path);
    out << "1 127.0.0.1:5001\n0 localhost:5000\n";
  }
  // Lines may appear in any order; entries come back indexed by rank.
  auto entries = parse_rank_map(path.string());
  REQUIRE(entries.size() == 2);
  CHECK(entries[0].rank == 0);
  CHECK(entries[0].host == "localhost");
  CHECK(entries[0].port == 5000);
  CHECK(entries[1].rank == 1);
  CHECK(entries[1].host == "127.0.0.1");
  CHECK(entries[1].port == 5001);
  std::filesystem::remove(path);
}

TEST_CASE("rank map parsing rejects duplicates, gaps, and missing files") {
  auto path = temp_file("rankmap_bad");
  {
    std::ofstream out(path);
    out << "0 h:1\n0 h:2\n";
  }
  CHECK_THROWS_AS(parse_rank_map(path.string()), ConfigError);
  {
    std::ofstream out(path);
    out << "0 h:1\n2 h:2\n";  // rank 1 missing
  }
  CHECK_THROWS_AS(parse_rank_map(path.string()), ConfigError);
  CHECK_THROWS_AS(parse_rank_map((path.string() + ".nowhere")), ConfigError);
  std::filesystem::remove(path);
}

TEST_CASE("tcp transport round-trips full-precision doubles on loopback") {
  auto map_path = write_rank_map("rankmap_tcp2", free_ports(2));
  TcpTransport tr(parse_rank_map(map_path));
  TrafficLedger ledger(2);
  std::vector<std::jthread> threads;
  std::vector<double> got(2, 0.0);
  for (int r = 0; r < 2; ++r) {
    threads.emplace_back([&, r] {
      WorkerCtx ctx{r, 2, &tr, &ledger};
      // 0.1 is not representable at f32; equality below proves the frames
      // carry doubles even though the ledger charges one word per value.
      Message m = words_msg({7}, {0.1 + r});
      ctx.send(1 - r, Phase::split, std::move(m));
      Message in = ctx.recv(1 - r, Phase::split);
      got[r] = in.reals.at(0);
    });
  }
  threads.clear();
  CHECK(got[0] == 0.1 + 1);
  CHECK(got[1] == 0.1);
  CHECK(ledger.at(0, Phase::split).words_sent == 2);
  CHECK(ledger.at(0, Phase::split).words_recv == 2);
  std::filesystem::remove(map_path);
}

TEST_CASE("tcp transport survives simultaneous large exchanges") {
  auto map_path = write_rank_map("rankmap_tcpbig", free_ports(2));
  TcpTransport tr(parse_rank_map(map_path));
  TrafficLedger ledger(2);
  const std::size_t big = 200000;
  std::vector<std::jthread> threads;
  std::vector<bool> ok(2, false);
  for (int r = 0; r < 2; ++r) {
    threads.emplace_back([&, r] {
      WorkerCtx ctx{r, 2, &tr, &ledger};
      Message m;
      m.reals.assign(big, static_cast<double>(r + 1));
      // Both ranks send a multi-megabyte frame before either receives: the
      // nonblocking sender must drain inbound data to avoid deadlock here.
      ctx.send(1 - r, Phase::split, std::move(m));
      Message in = ctx.recv(1 - r, Phase::split);
      ok[r] = in.reals.size() == big &&
              in.reals.front() == static_cast<double>(2 - r) &&
              in.reals.back() == static_cast<double>(2 - r);
    });
  }
  threads.clear();
  CHECK(ok[0]);
  CHECK(ok[1]);
  std::filesystem::remove(map_path);
}
