#pragma once

// Discrete-event scheduler and message fabric. Time is integer microseconds;
// events run in (time, sequence) order. Links add a seeded delay, may drop,
// and never reorder messages between the same ordered pair of nodes.

#include <compare>
#include <cstdint>
#include <functional>
#include <map>
#include <ostream>
#include <queue>
#include <set>
#include <sstream>
#include <string>
#include <utility>
#include <variant>
#include <vector>

#include "best/errors.hpp"
#include "best/rng.hpp"
#include "json.hpp"

namespace best {

struct SimTime {
  std::int64_t us = 0;

  static constexpr SimTime micros(std::int64_t v) { return {v}; }
  static constexpr SimTime millis(std::int64_t v) { return {v * 1000}; }
  static constexpr SimTime seconds(std::int64_t v) { return {v * 1'000'000}; }

  double to_seconds() const { return static_cast<double>(us) / 1e6; }

  friend constexpr SimTime operator+(SimTime a, SimTime b) { return {a.us + b.us}; }
  friend constexpr SimTime operator-(SimTime a, SimTime b) { return {a.us - b.us}; }
  friend constexpr auto operator<=>(SimTime, SimTime) = default;
};

// Parses a non-negative decimal number of seconds ("1", "0.25", "3.000001")
// into exact microseconds. More than six fractional digits is an error.
inline SimTime parse_seconds(const std::string& text) {
  if (text.empty()) throw ConfigInvalid("empty time value");
  std::int64_t whole = 0, frac = 0;
  int frac_digits = 0;
  bool dot = false;
  for (char c : text) {
    if (c == '.' && !dot) {
      dot = true;
      continue;
    }
    if (c < '0' || c > '9') throw ConfigInvalid("bad time value '" + text + "'");
    if (dot) {
      if (++frac_digits > 6) throw ConfigInvalid("time '" + text + "' is finer than 1 us");
      frac = frac * 10 + (c - '0');
    } else {
      whole = whole * 10 + (c - '0');
      if (whole > 9'000'000'000LL) throw ConfigInvalid("time '" + text + "' out of range");
    }
  }
  while (frac_digits++ < 6) frac *= 10;
  return SimTime::micros(whole * 1'000'000 + frac);
}

inline std::string format_seconds(SimTime t) {
  std::string out = std::to_string(t.us / 1'000'000);
  std::int64_t frac = t.us % 1'000'000;
  if (frac == 0) return out;
  std::string f = std::to_string(frac);
  f.insert(0, 6 - f.size(), '0');
  while (f.back() == '0') f.pop_back();
  return out + "." + f;
}

using NodeId = std::uint32_t;

// Owner of timers that belong to no simulated node (round clocks etc).
inline constexpr NodeId kSystemNode = 0xFFFFFFFFu;

struct LinkModel {
  SimTime latency = SimTime::millis(5);
  SimTime jitter{};               // extra delay drawn uniformly from [0, jitter]
  double drop_probability = 0.0;

  friend bool operator==(const LinkModel&, const LinkModel&) = default;
};

// ---------------------------------------------------------------------------
// Fault scripts

enum class FaultKind : std::uint8_t { Crash, Recover, Byzantine };

struct FaultAction {
  SimTime time;
  NodeId node = 0;
  FaultKind kind = FaultKind::Crash;
  std::string mode;  // Byzantine only

  friend bool operator==(const FaultAction&, const FaultAction&) = default;
};

inline std::string describe(const FaultAction& a) {
  switch (a.kind) {
    case FaultKind::Crash: return "crash";
    case FaultKind::Recover: return "recover";
    case FaultKind::Byzantine: return "byzantine " + a.mode;
  }
  return "?";
}

// Text form: entries separated by ';' or newlines, each
// "<seconds> <node> crash|recover|byzantine <mode>".
struct FaultScript {
  std::vector<FaultAction> actions;

  static FaultScript parse(const std::string& text) {
    FaultScript s;
    std::string entry;
    auto flush = [&](std::string e) {
      std::istringstream in(e);
      std::vector<std::string> words;
      for (std::string w; in >> w;) words.push_back(w);
      if (words.empty()) return;
      if (words.size() < 3) throw ConfigInvalid("fault entry '" + e + "': expected <time> <node> <action>");
      FaultAction a;
      a.time = parse_seconds(words[0]);
      try {
        std::size_t used = 0;
        const unsigned long n = std::stoul(words[1], &used);
        if (used != words[1].size() || n >= kSystemNode) throw std::invalid_argument("node");
        a.node = static_cast<NodeId>(n);
      } catch (const std::exception&) {
        throw ConfigInvalid("fault entry '" + e + "': bad node id '" + words[1] + "'");
      }
      if (words[2] == "crash" && words.size() == 3) a.kind = FaultKind::Crash;
      else if (words[2] == "recover" && words.size() == 3) a.kind = FaultKind::Recover;
      else if (words[2] == "byzantine" && words.size() == 4) {
        a.kind = FaultKind::Byzantine;
        a.mode = words[3];
      } else {
        throw ConfigInvalid("fault entry '" + e + "': unknown action");
      }
      s.actions.push_back(std::move(a));
    };
    for (char c : text) {
      if (c == ';' || c == '\n') {
        flush(entry);
        entry.clear();
      } else {
        entry.push_back(c);
      }
    }
    flush(entry);
    return s;
  }

  std::string to_text() const {
    std::string out;
    for (const auto& a : actions) {
      if (!out.empty()) out += "; ";
      out += format_seconds(a.time) + " " + std::to_string(a.node) + " " + describe(a);
    }
    return out;
  }
};

// ---------------------------------------------------------------------------
// Event log

enum class LogKind : std::uint8_t { Deliver, Drop, Discard, Timer, Fault };

inline const char* to_string(LogKind k) {
  switch (k) {
    case LogKind::Deliver: return "deliver";
    case LogKind::Drop: return "drop";
    case LogKind::Discard: return "discard";
    case LogKind::Timer: return "timer";
    case LogKind::Fault: return "fault";
  }
  return "?";
}

struct LogEntry {
  SimTime time;
  std::uint64_t seq = 0;
  LogKind kind = LogKind::Deliver;
  NodeId from = kSystemNode;
  NodeId to = kSystemNode;
  std::string what;

  friend bool operator==(const LogEntry&, const LogEntry&) = default;
};

inline std::string to_jsonl(const LogEntry& e) {
  nlohmann::json j{{"t", e.time.us},
                   {"seq", e.seq},
                   {"kind", to_string(e.kind)},
                   {"from", e.from == kSystemNode ? -1 : static_cast<std::int64_t>(e.from)},
                   {"to", e.to == kSystemNode ? -1 : static_cast<std::int64_t>(e.to)},
                   {"what", e.what}};
  return j.dump();
}

// ---------------------------------------------------------------------------
// Simulator
//
// Msg must have an ADL-visible `std::string describe(const Msg&)` for the log.

template <typename Msg>
class Simulator {
 public:
  struct Delivery {
    NodeId from;
    NodeId to;
    Msg message;
  };
  struct Timer {
    NodeId node;
    std::uint64_t tag;
    std::string label;
  };
  using Payload = std::variant<Delivery, Timer, FaultAction>;

  struct Event {
    SimTime time;
    std::uint64_t seq;
    Payload payload;
  };

  explicit Simulator(std::uint64_t seed = 0) : rng_(derive_seed(seed, 0x4E45)) {}

  SimTime now() const { return clock_; }
  const std::vector<LogEntry>& log() const { return log_; }
  std::size_t pending() const { return queue_.size(); }
  bool crashed(NodeId n) const { return crashed_.count(n) != 0; }
  void set_logging(bool on) { logging_ = on; }

  void schedule(SimTime at, Payload payload) {
    if (at < clock_)
      throw TimeTravel("event at " + std::to_string(at.us) + " us precedes clock " + std::to_string(clock_.us) + " us");
    queue_.push(Event{at, next_seq_++, std::move(payload)});
  }

  void schedule_timer(SimTime at, NodeId node, std::uint64_t tag, std::string label = {}) {
    schedule(at, Timer{node, tag, std::move(label)});
  }

  void load_faults(const FaultScript& script) {
    for (const auto& a : script.actions) schedule(a.time, a);
  }

  void send(NodeId from, NodeId to, Msg message, const LinkModel& link) {
    if (link.drop_probability > 0.0 && rng_.bernoulli(link.drop_probability)) {
      record(LogEntry{clock_, next_seq_++, LogKind::Drop, from, to, describe(message)});
      return;
    }
    SimTime delay = link.latency;
    if (link.jitter.us > 0) delay.us += static_cast<std::int64_t>(rng_.below(static_cast<std::uint64_t>(link.jitter.us) + 1));
    SimTime at = clock_ + delay;
    auto& last = last_delivery_[{from, to}];
    if (at < last) at = last;
    last = at;
    schedule(at, Delivery{from, to, std::move(message)});
  }

  // Runs every event with time <= t_end. Deliveries to crashed nodes are
  // logged as discarded and not handed to `handler`; crash and recover
  // actions update the crashed set before the handler sees them.
  template <typename Handler>
  const std::vector<LogEntry>& run_until(SimTime t_end, Handler&& handler) {
    if (t_end < clock_) throw TimeTravel("run_until: t_end precedes the clock");
    while (!queue_.empty() && queue_.top().time <= t_end) {
      Event ev = queue_.top();
      queue_.pop();
      clock_ = ev.time;
      if (auto* d = std::get_if<Delivery>(&ev.payload)) {
        const bool lost = crashed(d->to);
        record(LogEntry{ev.time, ev.seq, lost ? LogKind::Discard : LogKind::Deliver, d->from, d->to,
                        describe(d->message)});
        if (lost) continue;
      } else if (auto* t = std::get_if<Timer>(&ev.payload)) {
        record(LogEntry{ev.time, ev.seq, LogKind::Timer, kSystemNode, t->node, t->label});
        if (t->node != kSystemNode && crashed(t->node)) continue;
      } else {
        auto& f = std::get<FaultAction>(ev.payload);
        if (f.kind == FaultKind::Crash) crashed_.insert(f.node);
        if (f.kind == FaultKind::Recover) crashed_.erase(f.node);
        record(LogEntry{ev.time, ev.seq, LogKind::Fault, kSystemNode, f.node, describe(f)});
      }
      handler(static_cast<const Event&>(ev));
    }
    clock_ = t_end;
    return log_;
  }

 private:
  struct Later {
    bool operator()(const Event& a, const Event& b) const {
      if (a.time != b.time) return a.time > b.time;
      return a.seq > b.seq;
    }
  };

  void record(LogEntry e) {
    if (logging_) log_.push_back(std::move(e));
  }

  Rng rng_;
  SimTime clock_{};
  std::uint64_t next_seq_ = 0;
  std::priority_queue<Event, std::vector<Event>, Later> queue_;
  std::map<std::pair<NodeId, NodeId>, SimTime> last_delivery_;
  std::set<NodeId> crashed_;
  std::vector<LogEntry> log_;
  bool logging_ = true;
};

}  // namespace best
