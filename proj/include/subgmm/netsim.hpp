#pragma once

#include <cstdint>
#include <deque>
#include <vector>

#include "subgmm/codec.hpp"
#include "subgmm/common.hpp"

namespace subgmm {

struct ChannelConfig {
  double rate = 0.0;           // bits per second, 0 = unconstrained
  double burst = 8192.0;       // bytes, bucket capacity
  double buffer_capacity = 65536.0;  // bytes of queued frames
  double latency = 0.0;        // seconds added after departure
};

struct ChannelStats {
  // "Enqueued" counts every send attempt so that
  // enqueued = delivered + dropped + still queued.
  uint64_t enqueued_count = 0;
  uint64_t delivered_count = 0;
  uint64_t dropped_count = 0;
  uint64_t enqueued_bytes = 0;
  uint64_t delivered_bytes = 0;
  uint64_t dropped_bytes = 0;
};

enum class SendResult { Accepted, Dropped };

struct Delivery {
  WireMessage msg;
  double time = 0.0;  // departure + latency
};

// Fluid token-bucket link: tokens accrue continuously at rate/8 bytes per
// second up to `burst`; a queued frame departs at the exact instant the
// bucket holds its full framed size. The bucket starts drained, so the
// first frame pays its full serialization delay. Messages are atomic and
// FIFO; a frame that would overflow the buffer is tail-dropped with no
// retransmission.
class RateLimitedChannel {
 public:
  RateLimitedChannel() : RateLimitedChannel(ChannelConfig{}) {}
  explicit RateLimitedChannel(const ChannelConfig& cfg)
      : cfg_(cfg), tokens_(0.0) {
    SUBGMM_CHECK(cfg_.rate >= 0.0 && cfg_.burst > 0.0 &&
                     cfg_.buffer_capacity >= cfg_.burst &&
                     cfg_.latency >= 0.0,
                 BadConfig, "invalid channel parameters");
  }

  const ChannelConfig& config() const { return cfg_; }
  const ChannelStats& stats() const { return stats_; }
  double tokens() const { return tokens_; }
  double queued_bytes() const { return queued_bytes_; }
  size_t queued_count() const { return queue_.size(); }

  SendResult send(const WireMessage& msg, double now) {
    advance(now);
    const double size = double(msg.framed_bytes());
    SUBGMM_CHECK(cfg_.rate <= 0.0 || size <= cfg_.burst, BadConfig,
                 "frame larger than bucket burst can never depart");
    stats_.enqueued_count += 1;
    stats_.enqueued_bytes += msg.framed_bytes();
    if (queued_bytes_ + size > cfg_.buffer_capacity) {
      stats_.dropped_count += 1;
      stats_.dropped_bytes += msg.framed_bytes();
      return SendResult::Dropped;
    }
    queue_.push_back({msg, now});
    queued_bytes_ += size;
    return SendResult::Accepted;
  }

  std::vector<Delivery> poll(double now) {
    advance(now);
    std::vector<Delivery> out;
    out.swap(ready_);
    return out;
  }

 private:
  struct Pending {
    WireMessage msg;
    double enqueue_time;
  };

  // Moves the fluid state to `now`, emitting departures at their exact
  // analytic times.
  void advance(double now) {
    SUBGMM_CHECK(now >= last_time_ - 1e-12, TimeRegression,
                 "channel time moved backwards");
    now = std::max(now, last_time_);
    double cursor = last_time_;
    const double byte_rate = cfg_.rate / 8.0;
    while (!queue_.empty()) {
      const Pending& head = queue_.front();
      const double start = std::max(cursor, head.enqueue_time);
      if (start > now) break;
      const double size = double(head.msg.framed_bytes());
      double depart;
      if (cfg_.rate <= 0.0) {
        depart = start;
      } else {
        const double at_start =
            std::min(cfg_.burst, tokens_ + (start - cursor) * byte_rate);
        const double need = size - at_start;
        depart = need <= 0.0 ? start : start + need / byte_rate;
        if (depart > now) {
          tokens_ = std::min(cfg_.burst, tokens_ + (now - cursor) * byte_rate);
          cursor = now;
          break;
        }
        tokens_ = std::min(cfg_.burst, at_start + (depart - start) * byte_rate) -
                  size;
        if (tokens_ < 0.0) tokens_ = 0.0;
      }
      cursor = depart;
      stats_.delivered_count += 1;
      stats_.delivered_bytes += head.msg.framed_bytes();
      queued_bytes_ -= size;
      ready_.push_back({head.msg, depart + cfg_.latency});
      queue_.pop_front();
    }
    if (cursor < now) {
      tokens_ = std::min(cfg_.burst, tokens_ + (now - cursor) * cfg_.rate / 8.0);
    }
    last_time_ = now;
  }

  ChannelConfig cfg_;
  double tokens_;
  double last_time_ = 0.0;
  double queued_bytes_ = 0.0;
  std::deque<Pending> queue_;
  std::vector<Delivery> ready_;
  ChannelStats stats_;
};

}  // namespace subgmm
