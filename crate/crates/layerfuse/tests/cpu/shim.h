// Lets emitted kernels build as OpenMP C++: one thread block per parallel region,
// one OpenMP thread per CUDA thread, barriers as OpenMP barriers.
#include <omp.h>
#include <math.h>
#include <algorithm>
struct dim3_ { int x, y, z; };
static dim3_ blockIdx, blockDim;
static inline dim3_ tidx_() { int t = omp_get_thread_num(); return dim3_{t % blockDim.x, t / blockDim.x, 0}; }
#define threadIdx (tidx_())
#define __global__
#define __shared__ static
#define __constant__ static
#define __restrict__
#define __launch_bounds__(n)
#define __ldg(p) (*(p))
#define __syncthreads() _Pragma("omp barrier")
using std::min; using std::max;
#define LAUNCH(k, gx, gy, bx, by, args) do { blockDim = dim3_{bx, by, 1}; int nt_ = bx * by; omp_set_dynamic(0); \
  for (int j = 0; j < gy; ++j) for (int i = 0; i < gx; ++i) { blockIdx = dim3_{i, j, 0}; \
  _Pragma("omp parallel num_threads(nt_)") k args; } } while (0)
