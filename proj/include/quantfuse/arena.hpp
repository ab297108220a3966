// arena.hpp - two-tier instrumented arena allocator.
//
// Models a device caching allocator: requests round up to block_size
// multiples, freed buffers return to a pool without shrinking the
// reservation. "Allocated" tracks live requested bytes (the live tensor
// peak); "reserved" tracks the pool cap.

#pragma once

#include <cstdint>
#include <map>
#include <memory>
#include <vector>

#include "quantfuse/errors.hpp"

namespace qf {

class ArenaAllocator {
 public:
  explicit ArenaAllocator(int64_t block_size = 1 << 20)
      : block_size_(block_size) {
    if (block_size_ <= 0) throw ValueError("ArenaAllocator: block size must be positive");
  }

  struct Buffer {
    float* data = nullptr;
    int64_t count = 0;           // floats
    int64_t requested_bytes = 0;
    int64_t rounded_bytes = 0;
  };

  Buffer alloc_floats(int64_t count) {
    const int64_t requested = count * static_cast<int64_t>(sizeof(float));
    const int64_t rounded = round_up(requested);
    auto& pool = free_lists_[rounded];
    std::unique_ptr<float[]> mem;
    if (!pool.empty()) {
      mem = std::move(pool.back());
      pool.pop_back();
    } else {
      mem.reset(new float[static_cast<size_t>(rounded / sizeof(float))]);
      reserved_bytes_ += rounded;
      if (reserved_bytes_ > peak_reserved_) peak_reserved_ = reserved_bytes_;
    }
    live_bytes_ += requested;
    live_rounded_ += rounded;
    if (live_bytes_ > peak_live_) peak_live_ = live_bytes_;
    Buffer b{mem.get(), count, requested, rounded};
    in_use_.emplace(mem.get(), std::move(mem));
    return b;
  }

  void release(const Buffer& b) {
    auto it = in_use_.find(b.data);
    if (it == in_use_.end()) throw ValueError("ArenaAllocator: release of unknown buffer");
    free_lists_[b.rounded_bytes].push_back(std::move(it->second));
    in_use_.erase(it);
    live_bytes_ -= b.requested_bytes;
    live_rounded_ -= b.rounded_bytes;
  }

  // Frame boundary: everything must have been released.
  void check_drained() const {
    if (live_bytes_ != 0) throw ValueError("ArenaAllocator: live buffers at frame boundary");
  }

  int64_t block_size() const { return block_size_; }
  int64_t live_bytes() const { return live_bytes_; }
  int64_t reserved_bytes() const { return reserved_bytes_; }
  int64_t peak_allocated() const { return peak_live_; }
  int64_t peak_reserved() const { return peak_reserved_; }

 private:
  int64_t round_up(int64_t bytes) const {
    const int64_t blocks = (bytes + block_size_ - 1) / block_size_;
    return (blocks > 0 ? blocks : 1) * block_size_;
  }

  int64_t block_size_;
  int64_t live_bytes_ = 0;
  int64_t live_rounded_ = 0;
  int64_t reserved_bytes_ = 0;
  int64_t peak_live_ = 0;
  int64_t peak_reserved_ = 0;
  std::map<int64_t, std::vector<std::unique_ptr<float[]>>> free_lists_;
  std::map<float*, std::unique_ptr<float[]>> in_use_;
};

// RAII lease for arena buffers.
class ArenaLease {
 public:
  ArenaLease() = default;
  ArenaLease(ArenaAllocator& arena, int64_t count)
      : arena_(&arena), buf_(arena.alloc_floats(count)) {}
  ArenaLease(ArenaLease&& o) noexcept : arena_(o.arena_), buf_(o.buf_) {
    o.arena_ = nullptr;
  }
  ArenaLease& operator=(ArenaLease&& o) noexcept {
    reset();
    arena_ = o.arena_;
    buf_ = o.buf_;
    o.arena_ = nullptr;
    return *this;
  }
  ArenaLease(const ArenaLease&) = delete;
  ArenaLease& operator=(const ArenaLease&) = delete;
  ~ArenaLease() { reset(); }

  void reset() {
    if (arena_) {
      arena_->release(buf_);
      arena_ = nullptr;
    }
  }

  float* data() const { return buf_.data; }
  int64_t count() const { return buf_.count; }
  explicit operator bool() const { return arena_ != nullptr; }

 private:
  ArenaAllocator* arena_ = nullptr;
  ArenaAllocator::Buffer buf_;
};

}  // namespace qf
