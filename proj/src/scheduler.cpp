#include "essa/scheduler.hpp"

#include <algorithm>
#include <cmath>
#include <condition_variable>
#include <deque>
#include <fstream>
#include <map>
#include <mutex>
#include <set>
#include <thread>

#include "essa/error.hpp"

namespace essa {
namespace {

using Clock = std::chrono::steady_clock;

struct Event {
  std::size_t peer = 0;
  std::optional<wire::Message> message;
  ErrorCode error = ErrorCode::kTransportError;
  std::string what;
};

class Inbox {
 public:
  void push(Event e) {
    {
      std::lock_guard lock(mu_);
      events_.push_back(std::move(e));
    }
    cv_.notify_one();
  }

  std::optional<Event> pop_until(Clock::time_point deadline) {
    std::unique_lock lock(mu_);
    if (!cv_.wait_until(lock, deadline, [&] { return !events_.empty(); })) return std::nullopt;
    Event e = std::move(events_.front());
    events_.pop_front();
    return e;
  }

 private:
  std::mutex mu_;
  std::condition_variable cv_;
  std::deque<Event> events_;
};

struct Peer {
  std::unique_ptr<Connection> conn;
  std::thread reader;
  bool alive = true;
  bool greeted = false;
};

// Owns the peers; closes every connection and joins readers on scope exit.
class PeerSet {
 public:
  explicit PeerSet(std::vector<std::unique_ptr<Connection>> conns) {
    peers_.resize(conns.size());
    for (std::size_t i = 0; i < conns.size(); ++i) {
      peers_[i].conn = std::move(conns[i]);
      peers_[i].reader = std::thread([this, i] { read_loop(i); });
    }
  }

  ~PeerSet() {
    for (auto& p : peers_) p.conn->close();
    for (auto& p : peers_) {
      if (p.reader.joinable()) p.reader.join();
    }
  }

  PeerSet(const PeerSet&) = delete;
  PeerSet& operator=(const PeerSet&) = delete;

  std::size_t size() const { return peers_.size(); }
  Peer& operator[](std::size_t i) { return peers_[i]; }
  Inbox& inbox() { return inbox_; }

  // Returns false and marks the peer dead if the write fails.
  bool send(std::size_t i, const wire::Message& m) {
    if (!peers_[i].alive) return false;
    try {
      send_message(*peers_[i].conn, m);
      return true;
    } catch (const Error&) {
      drop(i);
      return false;
    }
  }

  void drop(std::size_t i) {
    peers_[i].alive = false;
    peers_[i].conn->close();
  }

  std::vector<std::size_t> alive() const {
    std::vector<std::size_t> out;
    for (std::size_t i = 0; i < peers_.size(); ++i) {
      if (peers_[i].alive && peers_[i].greeted) out.push_back(i);
    }
    return out;
  }

 private:
  void read_loop(std::size_t i) {
    for (;;) {
      try {
        inbox_.push({i, receive_message(*peers_[i].conn), ErrorCode::kTransportError, {}});
      } catch (const Error& e) {
        inbox_.push({i, std::nullopt, e.code(), e.what()});
        return;
      } catch (const std::exception& e) {
        inbox_.push({i, std::nullopt, ErrorCode::kTransportError, e.what()});
        return;
      }
    }
  }

  std::vector<Peer> peers_;
  Inbox inbox_;
};

void handshake(PeerSet& peers, const Digest& config_hash, std::chrono::milliseconds timeout) {
  const auto deadline = Clock::now() + timeout;
  std::size_t pending = peers.size();
  while (pending > 0) {
    auto ev = peers.inbox().pop_until(deadline);
    if (!ev) break;
    auto& peer = peers[ev->peer];
    if (peer.greeted || !peer.alive) continue;
    const auto* hello = ev->message ? std::get_if<wire::Hello>(&*ev->message) : nullptr;
    --pending;
    if (hello == nullptr) {
      peers.drop(ev->peer);
      continue;
    }
    wire::HelloAck ack;
    ack.worker_id = static_cast<std::uint32_t>(ev->peer);
    if (hello->protocol_version != wire::kProtocolVersion) {
      ack.status = wire::HelloStatus::kVersionMismatch;
    } else if (hello->config_hash != config_hash) {
      ack.status = wire::HelloStatus::kConfigMismatch;
    }
    peers.send(ev->peer, ack);
    if (ack.status != wire::HelloStatus::kOk) {
      peers.drop(ev->peer);
      continue;
    }
    peer.greeted = true;
  }
  for (std::size_t i = 0; i < peers.size(); ++i) {
    if (!peers[i].greeted && peers[i].alive) peers.drop(i);
  }
}

struct JobState {
  std::optional<std::size_t> owner;
  int attempts = 0;
  Clock::time_point sent{};
};

class GenerationDriver {
 public:
  GenerationDriver(PeerSet& peers, Generation& gen, const Digest& config_hash, const ClusterConfig& config,
                   RunReport& report)
      : peers_(peers), gen_(gen), hash_(config_hash), config_(config), report_(report), jobs_(gen.size()) {}

  void run() {
    const std::size_t k = jobs_per_worker(config_);
    std::vector<std::size_t> orphans;
    for (std::size_t n = 0; n < config_.workers; ++n) {
      const bool usable = n < peers_.size() && peers_[n].alive && peers_[n].greeted;
      for (std::size_t i = n * k; i < (n + 1) * k; ++i) {
        if (usable) {
          dispatch(i, n);
        } else {
          orphans.push_back(i);
        }
      }
    }
    redistribute(orphans);

    while (!gen_.complete()) {
      auto ev = peers_.inbox().pop_until(next_deadline());
      if (!ev) {
        expire_overdue();
        continue;
      }
      if (!ev->message) {
        lose_worker(ev->peer);
        continue;
      }
      if (const auto* r = std::get_if<wire::RewardReport>(&*ev->message)) {
        accept_reward(ev->peer, *r);
      } else if (const auto* e = std::get_if<wire::JobError>(&*ev->message)) {
        job_error(ev->peer, *e);
      }
    }
  }

 private:
  Clock::time_point next_deadline() const {
    auto deadline = Clock::time_point::max();
    for (std::size_t i = 0; i < jobs_.size(); ++i) {
      if (!gen_.rewards[i] && jobs_[i].owner) deadline = std::min(deadline, jobs_[i].sent + config_.job_timeout);
    }
    return deadline;
  }

  void dispatch(std::size_t i, std::size_t worker) {
    auto& job = jobs_[i];
    if (job.attempts >= 2) {
      throw Error(ErrorCode::kGenerationFailed, "candidate " + std::to_string(i) + " of generation " +
                                                    std::to_string(gen_.id) + " failed twice");
    }
    if (job.attempts > 0) ++report_.jobs_retried;
    ++job.attempts;
    job.owner = worker;
    job.sent = Clock::now();
    wire::EvalJob msg;
    msg.generation = gen_.id;
    msg.candidate = static_cast<std::uint32_t>(i);
    msg.seed = gen_.seeds[i];
    msg.config_hash = hash_;
    if (!peers_.send(worker, msg)) lose_worker(worker);
  }

  // Spreads jobs over the live workers in contiguous, balanced chunks,
  // avoiding `exclude` when another worker is available.
  void redistribute(std::vector<std::size_t> orphans, std::optional<std::size_t> exclude = std::nullopt) {
    if (orphans.empty()) return;
    auto alive = peers_.alive();
    if (exclude && alive.size() > 1) std::erase(alive, *exclude);
    if (alive.empty()) {
      throw Error(ErrorCode::kGenerationFailed, "no live workers left in generation " + std::to_string(gen_.id));
    }
    std::sort(orphans.begin(), orphans.end());
    const std::size_t per = (orphans.size() + alive.size() - 1) / alive.size();
    for (std::size_t j = 0; j < orphans.size(); ++j) {
      const std::size_t target = alive[j / per];
      if (!gen_.rewards[orphans[j]] && peers_[target].alive) {
        dispatch(orphans[j], target);
      } else if (!gen_.rewards[orphans[j]]) {
        jobs_[orphans[j]].owner.reset();
        redistribute({orphans[j]});
      }
    }
  }

  void lose_worker(std::size_t worker) {
    if (peers_[worker].alive) peers_.drop(worker);
    if (lost_.insert(worker).second) ++report_.workers_lost;
    std::vector<std::size_t> orphans;
    for (std::size_t i = 0; i < jobs_.size(); ++i) {
      if (!gen_.rewards[i] && jobs_[i].owner == worker) {
        jobs_[i].owner.reset();
        orphans.push_back(i);
      }
    }
    redistribute(orphans);
  }

  void expire_overdue() {
    const auto now = Clock::now();
    std::vector<std::size_t> late;
    for (std::size_t i = 0; i < jobs_.size(); ++i) {
      if (!gen_.rewards[i] && jobs_[i].owner && now >= jobs_[i].sent + config_.job_timeout) {
        late.push_back(*jobs_[i].owner);
      }
    }
    std::sort(late.begin(), late.end());
    late.erase(std::unique(late.begin(), late.end()), late.end());
    for (auto w : late) lose_worker(w);
  }

  void accept_reward(std::size_t worker, const wire::RewardReport& r) {
    if (r.generation != gen_.id || r.candidate >= jobs_.size()) return;  // stale or replayed
    auto& job = jobs_[r.candidate];
    if (gen_.rewards[r.candidate] || job.owner != worker) return;
    if (!std::isfinite(r.reward)) {
      job.owner.reset();
      redistribute({r.candidate}, worker);
      return;
    }
    gen_.rewards[r.candidate] = r.reward;
  }

  void job_error(std::size_t worker, const wire::JobError& e) {
    if (e.generation != gen_.id || e.candidate >= jobs_.size()) return;
    auto& job = jobs_[e.candidate];
    if (gen_.rewards[e.candidate] || job.owner != worker) return;
    if (e.code == static_cast<std::uint32_t>(ErrorCode::kConfigMismatch)) {
      lose_worker(worker);
      return;
    }
    job.owner.reset();
    redistribute({e.candidate}, worker);
  }

  PeerSet& peers_;
  Generation& gen_;
  const Digest& hash_;
  const ClusterConfig& config_;
  RunReport& report_;
  std::vector<JobState> jobs_;
  std::set<std::size_t> lost_;
};

void broadcast_rewards(PeerSet& peers, std::uint64_t generation, std::span<const double> rewards) {
  for (auto w : peers.alive()) {
    for (std::size_t i = 0; i < rewards.size(); ++i) {
      wire::RewardReport r;
      r.generation = generation;
      r.candidate = static_cast<std::uint32_t>(i);
      r.reward = rewards[i];
      r.worker_id = wire::kCoordinatorId;
      if (!peers.send(w, r)) break;
    }
  }
}

}  // namespace

std::string_view to_string(TransportKind t) { return t == TransportKind::kInProcess ? "inprocess" : "socket"; }

TransportKind parse_transport(std::string_view s) {
  if (s == "inprocess") return TransportKind::kInProcess;
  if (s == "socket") return TransportKind::kSocket;
  throw Error(ErrorCode::kInvalidConfig, "unknown transport '" + std::string(s) + "'");
}

void validate(const ClusterConfig& c) {
  if (c.population < 1 || c.workers < 1 || c.epochs < 1) {
    throw Error(ErrorCode::kInvalidCluster, "population, workers and epochs must all be at least 1");
  }
  if (c.population % c.workers != 0) {
    throw Error(ErrorCode::kInvalidCluster, "population " + std::to_string(c.population) +
                                                " is not divisible by " + std::to_string(c.workers) + " workers");
  }
  if (c.job_timeout.count() <= 0) throw Error(ErrorCode::kInvalidCluster, "job timeout must be positive");
}

std::size_t jobs_per_worker(const ClusterConfig& c) { return c.population / c.workers; }

RunReport run(const ClusterConfig& config, CmaState& state, std::vector<std::unique_ptr<Connection>> workers,
              const Digest& config_hash, const RunHooks& hooks, const ResumeInfo& resume) {
  validate(config);
  if (state.hyper.lambda != config.population) {
    throw Error(ErrorCode::kInvalidCluster, "optimizer population " + std::to_string(state.hyper.lambda) +
                                                " differs from cluster population " +
                                                std::to_string(config.population));
  }
  if (resume.history.size() != state.generation) {
    throw Error(ErrorCode::kInvalidConfig, "reward history covers " + std::to_string(resume.history.size()) +
                                               " generations but the state is at " +
                                               std::to_string(state.generation));
  }

  RunReport report;
  report.best_candidate = resume.best_candidate.value_or(Vector::Zero(static_cast<Eigen::Index>(state.dim)));
  report.best_reward = resume.best_reward;
  report.best_generation = resume.best_generation;
  report.evaluations = state.generation * config.population;

  PeerSet peers(std::move(workers));
  handshake(peers, config_hash, config.job_timeout);
  if (peers.alive().empty()) throw Error(ErrorCode::kTransportError, "no worker completed the handshake");

  for (std::size_t g = 0; g < resume.history.size(); ++g) broadcast_rewards(peers, g, resume.history[g]);

  while (state.generation < config.epochs) {
    const auto started = Clock::now();
    Generation gen = ask(state);
    GenerationDriver(peers, gen, config_hash, config, report).run();
    tell(state, gen);

    GenerationMetrics m;
    m.generation = gen.id;
    m.rewards.reserve(gen.size());
    for (const auto& r : gen.rewards) m.rewards.push_back(*r);
    broadcast_rewards(peers, gen.id, m.rewards);

    report.evaluations += gen.size();
    m.evaluations = report.evaluations;
    m.best = *std::max_element(m.rewards.begin(), m.rewards.end());
    m.worst = *std::min_element(m.rewards.begin(), m.rewards.end());
    double sum = 0.0;
    for (double r : m.rewards) sum += r;
    m.mean = sum / static_cast<double>(m.rewards.size());
    for (std::size_t i = 0; i < gen.size(); ++i) {
      if (m.rewards[i] > report.best_reward) {
        report.best_reward = m.rewards[i];
        report.best_candidate = gen.candidates[i];
        report.best_generation = gen.id;
      }
    }
    m.subset_hash = hooks.subset_hash ? hooks.subset_hash(gen.id) : "-";
    m.wall_millis = static_cast<std::uint64_t>(
        std::chrono::duration_cast<std::chrono::milliseconds>(Clock::now() - started).count());
    report.generations.push_back(std::move(m));
    if (hooks.on_generation) hooks.on_generation(state, report.generations.back(), report);

    if (config.convergence_threshold > 0.0 && converged(state, config.convergence_threshold)) {
      report.converged = true;
      break;
    }
    if (hooks.stop_when && hooks.stop_when(report)) break;
  }

  for (auto w : peers.alive()) peers.send(w, wire::Shutdown{});
  return report;
}

void worker_serve(Connection& conn, const CandidateEvaluator& evaluator, const CmaState& initial_state,
                  const Digest& config_hash, const WorkerOptions& options) {
  CmaState replica = initial_state;
  replica.awaiting_tell = false;
  std::optional<Generation> current;
  std::map<std::uint64_t, std::vector<std::optional<double>>> pending;
  std::uint32_t worker_id = 0;
  int completed = 0;
  const auto& faults = options.faults;
  const std::size_t lambda = replica.hyper.lambda;

  auto ensure_current = [&] {
    if (!current) current = ask(replica);
  };
  auto advance = [&] {
    for (;;) {
      auto it = pending.find(replica.generation);
      if (it == pending.end()) return;
      if (!std::all_of(it->second.begin(), it->second.end(), [](const auto& r) { return r.has_value(); })) return;
      ensure_current();
      current->rewards = it->second;
      tell(replica, *current);
      current.reset();
      pending.erase(it);
    }
  };
  auto job_error = [&](const wire::EvalJob& job, ErrorCode code, const std::string& what) {
    wire::JobError e;
    e.generation = job.generation;
    e.candidate = job.candidate;
    e.code = static_cast<std::uint32_t>(code);
    e.message = what;
    send_message(conn, e);
  };

  send_message(conn, wire::Hello{wire::kProtocolVersion, config_hash});
  for (;;) {
    wire::Message msg;
    try {
      msg = receive_message(conn);
    } catch (const Error& e) {
      if (e.code() == ErrorCode::kTransportError) return;  // coordinator went away
      throw;
    }

    if (const auto* ack = std::get_if<wire::HelloAck>(&msg)) {
      if (ack->status != wire::HelloStatus::kOk) {
        conn.close();
        throw Error(ErrorCode::kConfigMismatch,
                    ack->status == wire::HelloStatus::kConfigMismatch ? "coordinator rejected the config hash"
                                                                      : "coordinator speaks another protocol version");
      }
      worker_id = ack->worker_id;
    } else if (const auto* r = std::get_if<wire::RewardReport>(&msg)) {
      if (r->worker_id != wire::kCoordinatorId || r->candidate >= lambda || r->generation < replica.generation) continue;
      auto& slot = pending[r->generation];
      if (slot.empty()) slot.resize(lambda);
      slot[r->candidate] = r->reward;
      advance();
    } else if (const auto* job = std::get_if<wire::EvalJob>(&msg)) {
      if (faults.disconnect_after >= 0 && completed >= faults.disconnect_after) {
        conn.close();
        return;
      }
      if (faults.hang_after >= 0 && completed >= faults.hang_after) {
        try {
          for (;;) receive_message(conn);
        } catch (const Error&) {
          return;
        }
      }
      if (job->config_hash != config_hash) {
        job_error(*job, ErrorCode::kConfigMismatch, "config hash differs from this worker's");
        continue;
      }
      if (job->generation != replica.generation || job->candidate >= lambda) {
        job_error(*job, ErrorCode::kProtocolViolation, "job for generation " + std::to_string(job->generation) +
                                                           " but replica is at " + std::to_string(replica.generation));
        continue;
      }
      ensure_current();
      if (current->seeds[job->candidate] != job->seed) {
        job_error(*job, ErrorCode::kProtocolViolation, "candidate seed does not match the replica");
        continue;
      }
      if (faults.error_after >= 0 && completed == faults.error_after) {
        ++completed;
        job_error(*job, ErrorCode::kJobError, "injected evaluation failure");
        continue;
      }
      const auto started = Clock::now();
      wire::RewardReport report;
      report.generation = job->generation;
      report.candidate = job->candidate;
      report.worker_id = worker_id;
      try {
        const auto& x = current->candidates[job->candidate];
        report.reward = evaluator(std::span(x.data(), static_cast<std::size_t>(x.size())), job->generation,
                                  job->candidate);
      } catch (const Error& e) {
        job_error(*job, e.code(), e.what());
        continue;
      } catch (const std::exception& e) {
        job_error(*job, ErrorCode::kJobError, e.what());
        continue;
      }
      report.eval_millis = static_cast<std::uint64_t>(
          std::chrono::duration_cast<std::chrono::milliseconds>(Clock::now() - started).count());
      if (faults.corrupt_after >= 0 && completed >= faults.corrupt_after) {
        auto frame = wire::encode_frame(report);
        frame.back() ^= 0xFF;
        conn.write(frame);
      } else {
        send_message(conn, report);
      }
      ++completed;
    } else if (std::holds_alternative<wire::Shutdown>(msg)) {
      return;
    }
  }
}

RunReport run_in_process(const ClusterConfig& config, CmaState& state, const CmaState& initial_state,
                         const EvaluatorFactory& evaluators, const Digest& config_hash, const RunHooks& hooks,
                         const ResumeInfo& resume, const InProcessOptions& options) {
  validate(config);
  std::vector<std::unique_ptr<Connection>> coordinator_ends;
  std::vector<std::unique_ptr<Connection>> worker_ends;
  std::vector<std::shared_ptr<const CandidateEvaluator>> evals;
  for (std::size_t n = 0; n < config.workers; ++n) {
    auto [a, b] = make_pipe();
    if (options.counters) {
      a = std::make_unique<ByteCountingConnection>(std::move(a), options.counters);
      b = std::make_unique<ByteCountingConnection>(std::move(b), options.counters);
    }
    coordinator_ends.push_back(std::move(a));
    worker_ends.push_back(std::move(b));
    evals.push_back(evaluators(n));
  }

  std::vector<std::thread> threads;
  for (std::size_t n = 0; n < config.workers; ++n) {
    const WorkerOptions opts = n < options.worker_options.size() ? options.worker_options[n] : WorkerOptions{};
    threads.emplace_back([&, n, opts] {
      try {
        worker_serve(*worker_ends[n], *evals[n], initial_state, config_hash, opts);
      } catch (const std::exception&) {
        worker_ends[n]->close();
      }
    });
  }
  struct Joiner {
    std::vector<std::thread>& threads;
    std::vector<std::unique_ptr<Connection>>& ends;
    ~Joiner() {
      for (auto& e : ends) e->close();
      for (auto& t : threads) t.join();
    }
  } joiner{threads, worker_ends};

  return run(config, state, std::move(coordinator_ends), config_hash, hooks, resume);
}

RunReport run_socket(const ClusterConfig& config, CmaState& state, const Endpoint& endpoint,
                     std::chrono::milliseconds accept_timeout, const Digest& config_hash, const RunHooks& hooks,
                     const ResumeInfo& resume, std::function<void(std::uint16_t)> on_listening) {
  validate(config);
  TcpListener listener(endpoint);
  if (on_listening) on_listening(listener.port());
  std::vector<std::unique_ptr<Connection>> conns;
  const auto deadline = Clock::now() + accept_timeout;
  while (conns.size() < config.workers) {
    const auto left = std::chrono::duration_cast<std::chrono::milliseconds>(deadline - Clock::now());
    if (left.count() <= 0) break;
    if (auto c = listener.accept(left)) conns.push_back(std::move(c));
  }
  listener.close();
  if (conns.size() < config.workers) {
    throw Error(ErrorCode::kTransportError, "only " + std::to_string(conns.size()) + " of " +
                                                std::to_string(config.workers) + " workers connected");
  }
  return run(config, state, std::move(conns), config_hash, hooks, resume);
}

std::vector<ScalingRow> measure_scaling(const ScalingOptions& options, const CmaState& initial_state,
                                        const EvaluatorFactory& evaluators, const Digest& config_hash) {
  std::vector<ScalingRow> rows;
  for (auto n : options.worker_counts) {
    ClusterConfig cluster;
    cluster.population = options.population;
    cluster.workers = n;
    cluster.epochs = options.generations;
    cluster.convergence_threshold = 0.0;
    CmaState state = initial_state;
    RunHooks hooks;
    if (options.target_reward) {
      hooks.stop_when = [&](const RunReport& r) { return r.best_reward >= *options.target_reward; };
    }
    const auto started = Clock::now();
    const auto report = run_in_process(cluster, state, initial_state, evaluators, config_hash, hooks);
    ScalingRow row;
    row.workers = n;
    row.seconds = std::chrono::duration<double>(Clock::now() - started).count();
    row.generations = report.generations.size();
    row.best_reward = report.best_reward;
    row.reached = !options.target_reward || report.best_reward >= *options.target_reward;
    rows.push_back(row);
  }
  if (!rows.empty()) {
    const auto& base = rows.front();
    for (auto& r : rows) {
      r.speedup = base.seconds / r.seconds;
      r.efficiency = r.speedup * static_cast<double>(base.workers) / static_cast<double>(r.workers);
    }
  }
  return rows;
}

void write_scaling_csv(const std::filesystem::path& path, const std::vector<ScalingRow>& rows) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw Error(ErrorCode::kIoError, "cannot write " + path.string());
  out << "workers,seconds,generations,best_reward,reached_target,speedup,efficiency\n";
  out.precision(6);
  for (const auto& r : rows) {
    out << r.workers << ',' << r.seconds << ',' << r.generations << ',' << r.best_reward << ','
        << (r.reached ? 1 : 0) << ',' << r.speedup << ',' << r.efficiency << '\n';
  }
}

}  // namespace essa
