#include "dvps/parallel.hpp"

#include <atomic>
#include <cstdlib>
#include <exception>
#include <mutex>
#include <thread>
#include <vector>

namespace dvps {

void parallel_for(int count, int threads, const std::function<void(int)>& fn) {
  if (count <= 0) return;
  if (threads <= 1 || count == 1) {
    for (int i = 0; i < count; ++i) fn(i);
    return;
  }
  const int workers = std::min(threads, count);
  std::atomic<int> next{0};
  std::exception_ptr first_error;
  std::mutex error_mutex;
  std::vector<std::thread> pool;
  pool.reserve(static_cast<std::size_t>(workers));
  for (int w = 0; w < workers; ++w) {
    pool.emplace_back([&]() {
      while (true) {
        const int i = next.fetch_add(1);
        if (i >= count) return;
        try {
          fn(i);
        } catch (...) {
          std::lock_guard<std::mutex> lock(error_mutex);
          if (!first_error) first_error = std::current_exception();
        }
      }
    });
  }
  for (std::thread& t : pool) t.join();
  if (first_error) std::rethrow_exception(first_error);
}

int env_thread_count() {
  const char* value = std::getenv("DVPS_THREADS");
  if (value == nullptr) return 1;
  const int n = std::atoi(value);
  return n > 0 ? n : 1;
}

}  // namespace dvps
