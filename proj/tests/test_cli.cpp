#include <arpa/inet.h>
#include <netinet/in.h>
#include <sys/socket.h>
#include <sys/wait.h>
#include <unistd.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "doctest.h"

#ifndef OKLAB_CLI_PATH
#error "OKLAB_CLI_PATH must point at the oklab binary"
#endif

namespace {

namespace fs = std::filesystem;

fs::path temp_path(const std::string& stem) {
  static int counter = 0;
  return fs::temp_directory_path() / (stem + "." + std::to_string(::getpid()) +
                                      "." + std::to_string(counter++));
}

struct CliResult {
  int exit_code = -1;
  std::string output;  // stdout + stderr
};

/** Runs the oklab binary through the shell; `prefix` can set environment
 *  variables ("OKLAB_SEED=9 "). */
CliResult run_cli(const std::string& args, const std::string& prefix = "") {
  fs::path out = temp_path("cli_out");
  std::string cmd = prefix + std::string(OKLAB_CLI_PATH) + " " + args + " > " +
                    out.string() + " 2>&1";
  int status = std::system(cmd.c_str());
  CliResult res;
  if (WIFEXITED(status)) res.exit_code = WEXITSTATUS(status);
  std::ifstream in(out, std::ios::binary);
  std::stringstream buf;
  buf << in.rdbuf();
  res.output = buf.str();
  fs::remove(out);
  return res;
}

std::string slurp(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  std::stringstream buf;
  buf << in.rdbuf();
  return buf.str();
}

std::size_t count_lines(const std::string& s) {
  std::size_t lines = 0;
  for (char c : s) {
    if (c == '\n') ++lines;
  }
  return lines;
}

std::string write_loopback_rank_map(int count) {
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
  fs::path path = temp_path("cli_rankmap");
  std::ofstream out(path);
  for (int r = 0; r < count; ++r) {
    out << r << " 127.0.0.1:" << ports[static_cast<std::size_t>(r)] << "\n";
  }
  return path.string();
}

const char* kMetricsHeader =
    "iter,objective,phase,rank,words_sent,words_recv,msgs,selected_k,exact_k,"
    "xi,wall_ns";

}  // namespace

TEST_CASE("cli smoke run passes checks and writes the metrics file") {
  fs::path metrics = temp_path("cli_smoke");
  CliResult res = run_cli(
      "--algorithm oktopk --workers 2 --n 200 --density 0.05 --steps 3 "
      "--problem leastsquares --seed 4 --out " +
      metrics.string());
  CHECK(res.exit_code == 0);
  CHECK(res.output.find("k=10") != std::string::npos);
  CHECK(res.output.find("PASS\n") != std::string::npos);
  CHECK(res.output.find("FAIL") == std::string::npos);

  std::string body = slurp(metrics);
  CHECK(body.rfind(kMetricsHeader, 0) == 0);  // starts with the exact header
  // 3 iterations x 5 oktopk phases x 2 ranks, plus the header line.
  CHECK(count_lines(body) == 31);
  fs::remove(metrics);
}

TEST_CASE("cli usage errors exit with code 2") {
  CHECK(run_cli("--algorithm fft").exit_code == 2);
  CHECK(run_cli("--workers 3").exit_code == 2);
  CHECK(run_cli("--workers nope").exit_code == 2);  // CLI11 parse error
  CHECK(run_cli("--no-such-flag").exit_code == 2);
  CHECK(run_cli("--transport tcp").exit_code == 2);  // rank map required
  CHECK(run_cli("--problem escher").exit_code == 2);
  CHECK(run_cli("--format yaml").exit_code == 2);
  CHECK(run_cli("--instrument-xi --algorithm topka").exit_code == 2);
  CliResult bad = run_cli("--algorithm fft");
  CHECK(bad.output.find("error:") != std::string::npos);
}

TEST_CASE("cli help exits zero") {
  CliResult res = run_cli("--help");
  CHECK(res.exit_code == 0);
  CHECK(res.output.find("--algorithm") != std::string::npos);
}

TEST_CASE("cli runs are byte-reproducible") {
  fs::path a = temp_path("cli_rep_a");
  fs::path b = temp_path("cli_rep_b");
  const std::string common =
      "--algorithm gtopk --workers 4 --n 128 --density 0.1 --steps 4 "
      "--problem mlp --seed 12 --out ";
  CHECK(run_cli(common + a.string()).exit_code == 0);
  CHECK(run_cli(common + b.string()).exit_code == 0);
  std::string body_a = slurp(a);
  CHECK(!body_a.empty());
  CHECK(body_a == slurp(b));
  fs::remove(a);
  fs::remove(b);
}

TEST_CASE("OKLAB_SEED overrides --seed") {
  fs::path flag_run = temp_path("cli_seed_flag");
  fs::path env_run = temp_path("cli_seed_env");
  fs::path other = temp_path("cli_seed_other");
  const std::string common =
      "--algorithm topka --workers 2 --n 100 --density 0.05 --steps 3 "
      "--problem leastsquares --out ";
  CHECK(run_cli(common + flag_run.string() + " --seed 9").exit_code == 0);
  CHECK(run_cli(common + env_run.string() + " --seed 4", "OKLAB_SEED=9 ")
            .exit_code == 0);
  CHECK(run_cli(common + other.string() + " --seed 4").exit_code == 0);
  CHECK(slurp(env_run) == slurp(flag_run));
  CHECK(slurp(other) != slurp(flag_run));
  CHECK(run_cli("--seed 4", "OKLAB_SEED=abc ").exit_code == 2);
  fs::remove(flag_run);
  fs::remove(env_run);
  fs::remove(other);
}

TEST_CASE("cli emits JSON lines on request") {
  fs::path metrics = temp_path("cli_jsonl");
  CliResult res = run_cli(
      "--algorithm topkdsa --workers 2 --n 64 --density 0.1 --steps 2 "
      "--format jsonl --out " +
      metrics.string());
  CHECK(res.exit_code == 0);
  std::string body = slurp(metrics);
  REQUIRE(!body.empty());
  // 2 iterations x 2 topkdsa phases x 2 ranks, one JSON object per line.
  CHECK(count_lines(body) == 8);
  std::stringstream lines(body);
  std::string line;
  while (std::getline(lines, line)) {
    REQUIRE(!line.empty());
    CHECK(line.front() == '{');
    CHECK(line.back() == '}');
    CHECK(line.find("\"iter\":") != std::string::npos);
  }
  fs::remove(metrics);
}

TEST_CASE("cli runs over the tcp transport with a rank map") {
  std::string rank_map = write_loopback_rank_map(2);
  CliResult res = run_cli(
      "--algorithm oktopk --workers 2 --n 64 --density 0.1 --steps 2 "
      "--transport tcp --rank-map " +
      rank_map);
  CHECK(res.exit_code == 0);
  CHECK(res.output.find("transport=tcp") != std::string::npos);
  CHECK(res.output.find("PASS\n") != std::string::npos);
  fs::remove(rank_map);
}

TEST_CASE("cli reports xi statistics when instrumented") {
  CliResult res = run_cli(
      "--algorithm oktopk --workers 2 --n 100 --density 0.1 --steps 3 "
      "--instrument-xi");
  CHECK(res.exit_code == 0);
  CHECK(res.output.find("xi: max") != std::string::npos);
}
