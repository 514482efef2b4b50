#include "introspect/exec.hpp"

#ifdef _OPENMP
#include <omp.h>
#endif

namespace introspect {

void set_worker_count(std::size_t workers) {
#ifdef _OPENMP
  if (workers > 0) omp_set_num_threads(static_cast<int>(workers));
#else
  (void)workers;
#endif
}

std::size_t worker_count() {
#ifdef _OPENMP
  return static_cast<std::size_t>(omp_get_max_threads());
#else
  return 1;
#endif
}

}  // namespace introspect
