#pragma once

#include <cstddef>
#include <functional>

namespace usub {

// Runs fn(chunk_index, begin, end) over [0, n_items) split into fixed-size
// chunks. The chunk layout depends only on n_items and chunk_size, never on
// the thread count, so per-chunk results can be reduced in chunk order for
// bit-identical totals at any parallelism level.
void parallel_chunks(std::size_t n_items, std::size_t chunk_size,
                     const std::function<void(std::size_t, std::size_t, std::size_t)>& fn);

std::size_t chunk_count(std::size_t n_items, std::size_t chunk_size);

}  // namespace usub
