#pragma once

#include <cstddef>
#include <exception>

namespace introspect {

/// Selects the serial reference path or the OpenMP path of a batch kernel.
/// Both produce bit-identical results: parallel loops write per-item slots
/// and any reduction is done afterwards in item order.
enum class Exec { serial, parallel };

/// Caps OpenMP threads for parallel kernels; 0 leaves the runtime default.
void set_worker_count(std::size_t workers);
std::size_t worker_count();

/// body(i) for i in [0, n). The first exception thrown by any item is
/// rethrown after the loop.
template <class F>
void for_each_index(std::size_t n, Exec exec, F&& body) {
  if (exec == Exec::serial) {
    for (std::size_t i = 0; i < n; ++i) body(i);
    return;
  }
  std::exception_ptr first;
  const long long count = static_cast<long long>(n);
#pragma omp parallel for schedule(dynamic, 4)
  for (long long i = 0; i < count; ++i) {
    try {
      body(static_cast<std::size_t>(i));
    } catch (...) {
#pragma omp critical(introspect_for_each_error)
      if (!first) first = std::current_exception();
    }
  }
  if (first) std::rethrow_exception(first);
}

}  // namespace introspect
