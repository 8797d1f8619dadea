#include "ssmavs/threadpool.hpp"

#include <atomic>
#include <cstdlib>
#include <thread>
#include <vector>

namespace ssmavs {

namespace {

int env_default_threads() {
  int hw = static_cast<int>(std::thread::hardware_concurrency());
  if (hw < 1) hw = 1;
  const char* raw = std::getenv("SSMAVS_THREADS");
  if (raw == nullptr || *raw == '\0') return hw;
  char* end = nullptr;
  long v = std::strtol(raw, &end, 10);
  if (end == raw || v < 1) return hw;
  return static_cast<int>(std::min<long>(v, hw));
}

std::atomic<int>& thread_limit() {
  static std::atomic<int> limit{env_default_threads()};
  return limit;
}

}  // namespace

int max_threads() { return thread_limit().load(); }

void set_max_threads(int n) {
  thread_limit().store(n >= 1 ? n : env_default_threads());
}

void parallel_chunks(i64 n, i64 chunk_size,
                     const std::function<void(i64, i64)>& fn) {
  check(chunk_size >= 1, "parallel_chunks: chunk_size must be >= 1");
  if (n <= 0) return;
  const i64 chunks = (n + chunk_size - 1) / chunk_size;
  const int workers =
      static_cast<int>(std::min<i64>(max_threads(), chunks));
  if (workers <= 1) {
    for (i64 c = 0; c < chunks; ++c) {
      const i64 b = c * chunk_size;
      fn(b, std::min(n, b + chunk_size));
    }
    return;
  }
  std::atomic<i64> next{0};
  auto run = [&] {
    for (;;) {
      const i64 c = next.fetch_add(1);
      if (c >= chunks) return;
      const i64 b = c * chunk_size;
      fn(b, std::min(n, b + chunk_size));
    }
  };
  std::vector<std::thread> extra;
  extra.reserve(workers - 1);
  for (int w = 1; w < workers; ++w) extra.emplace_back(run);
  run();
  for (auto& t : extra) t.join();
}

}  // namespace ssmavs
