#pragma once

// Newline-delimited JSON protocol that lets an external process act as a
// scorer or selector.
//
// Every request is one line {"id":N,"method":M,"params":{...}} and is answered
// by exactly one line carrying the same id, either {"id":N,"result":{...}} or
// {"id":N,"error":{"code":C,"message":S}}. Requests are strictly lockstep per
// connection. Methods:
//
//   handshake                                 -> identity, boundary, marker, eos, eos_id,
//                                                vocab_size, protocol, roles
//   tokenize          {text}                  -> {ids, texts}
//   detokenize        {ids}                   -> {text}
//   score_prefix      {payload, ids}          -> {logprobs}
//   next_distribution {payload, ids, k}       -> {entries: [[id, text, logprob], ...]}
//   select            {payload, surfaces}     -> {scores}
//
// Reals use natural logs; -inf travels as the string "-inf".

#include <cerrno>
#include <chrono>
#include <csignal>
#include <cstring>
#include <istream>
#include <memory>
#include <mutex>
#include <ostream>
#include <sstream>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include <fcntl.h>
#include <netdb.h>
#include <netinet/in.h>
#include <poll.h>
#include <sys/socket.h>
#include <sys/types.h>
#include <sys/wait.h>
#include <unistd.h>

#include "wordfuse/json_util.hpp"
#include "wordfuse/rerank.hpp"
#include "wordfuse/scoring.hpp"

namespace wordfuse::protocol {

inline constexpr int kVersion = 1;
inline constexpr std::chrono::milliseconds kDefaultTimeout{30'000};

/// A bidirectional line stream.
class Channel {
 public:
  virtual ~Channel() = default;
  virtual void send(const std::string& line) = 0;
  /// Next line without its terminator. Throws Timeout or ModelUnavailable.
  virtual std::string receive(std::chrono::milliseconds timeout) = 0;
};

namespace detail {

inline void ignore_sigpipe() {
  static const bool once = [] {
    std::signal(SIGPIPE, SIG_IGN);
    return true;
  }();
  (void)once;
}

inline void write_all(int fd, std::string_view data) {
  while (!data.empty()) {
    const auto n = ::write(fd, data.data(), data.size());
    if (n < 0) {
      if (errno == EINTR) continue;
      throw ModelUnavailable(std::string("write to endpoint failed: ") + std::strerror(errno));
    }
    data.remove_prefix(static_cast<std::size_t>(n));
  }
}

/// Buffered line reader over a file descriptor with a deadline.
class LineReader {
 public:
  explicit LineReader(int fd) : fd_(fd) {}

  std::string read_line(std::chrono::milliseconds timeout) {
    const auto deadline = std::chrono::steady_clock::now() + timeout;
    for (;;) {
      if (const auto nl = buffer_.find('\n'); nl != std::string::npos) {
        std::string line = buffer_.substr(0, nl);
        buffer_.erase(0, nl + 1);
        if (!line.empty() && line.back() == '\r') line.pop_back();
        return line;
      }
      const auto left = std::chrono::duration_cast<std::chrono::milliseconds>(
          deadline - std::chrono::steady_clock::now());
      if (left.count() <= 0) throw Timeout("endpoint did not answer within " +
                                           std::to_string(timeout.count()) + " ms");
      pollfd pfd{fd_, POLLIN, 0};
      const int ready = ::poll(&pfd, 1, static_cast<int>(left.count()));
      if (ready < 0) {
        if (errno == EINTR) continue;
        throw ModelUnavailable(std::string("poll failed: ") + std::strerror(errno));
      }
      if (ready == 0) continue;
      char chunk[4096];
      const auto n = ::read(fd_, chunk, sizeof chunk);
      if (n < 0) {
        if (errno == EINTR) continue;
        throw ModelUnavailable(std::string("read from endpoint failed: ") + std::strerror(errno));
      }
      if (n == 0) throw ModelUnavailable("endpoint closed the connection");
      buffer_.append(chunk, static_cast<std::size_t>(n));
    }
  }

 private:
  int fd_;
  std::string buffer_;
};

}  // namespace detail

/// Talks to a child process over its stdin/stdout. stderr is inherited.
class ChildProcessChannel final : public Channel {
 public:
  explicit ChildProcessChannel(std::vector<std::string> argv) {
    if (argv.empty()) throw ModelUnavailable("empty endpoint command");
    detail::ignore_sigpipe();
    int to_child[2];
    int from_child[2];
    if (::pipe(to_child) != 0) throw ModelUnavailable("pipe() failed");
    if (::pipe(from_child) != 0) {
      ::close(to_child[0]);
      ::close(to_child[1]);
      throw ModelUnavailable("pipe() failed");
    }
    std::vector<char*> args;
    for (auto& a : argv) args.push_back(a.data());
    args.push_back(nullptr);

    pid_ = ::fork();
    if (pid_ < 0) throw ModelUnavailable("fork() failed");
    if (pid_ == 0) {
      ::dup2(to_child[0], STDIN_FILENO);
      ::dup2(from_child[1], STDOUT_FILENO);
      ::close(to_child[0]);
      ::close(to_child[1]);
      ::close(from_child[0]);
      ::close(from_child[1]);
      ::execvp(args[0], args.data());
      ::_exit(127);
    }
    ::close(to_child[0]);
    ::close(from_child[1]);
    in_ = to_child[1];
    out_ = from_child[0];
    ::fcntl(in_, F_SETFD, FD_CLOEXEC);
    ::fcntl(out_, F_SETFD, FD_CLOEXEC);
    reader_ = std::make_unique<detail::LineReader>(out_);
  }

  ChildProcessChannel(const ChildProcessChannel&) = delete;
  ChildProcessChannel& operator=(const ChildProcessChannel&) = delete;

  ~ChildProcessChannel() override {
    if (in_ >= 0) ::close(in_);
    if (out_ >= 0) ::close(out_);
    if (pid_ > 0) {
      int status = 0;
      for (int i = 0; i < 50; ++i) {
        if (::waitpid(pid_, &status, WNOHANG) == pid_) return;
        ::usleep(10'000);
      }
      ::kill(pid_, SIGKILL);
      ::waitpid(pid_, &status, 0);
    }
  }

  void send(const std::string& line) override { detail::write_all(in_, line + "\n"); }
  std::string receive(std::chrono::milliseconds timeout) override {
    return reader_->read_line(timeout);
  }

 private:
  pid_t pid_ = -1;
  int in_ = -1;
  int out_ = -1;
  std::unique_ptr<detail::LineReader> reader_;
};

/// Stream socket client.
class SocketChannel final : public Channel {
 public:
  SocketChannel(const std::string& host, const std::string& port) {
    detail::ignore_sigpipe();
    addrinfo hints{};
    hints.ai_family = AF_UNSPEC;
    hints.ai_socktype = SOCK_STREAM;
    addrinfo* found = nullptr;
    if (::getaddrinfo(host.c_str(), port.c_str(), &hints, &found) != 0) {
      throw ModelUnavailable("cannot resolve " + host + ":" + port);
    }
    for (auto* ai = found; ai; ai = ai->ai_next) {
      fd_ = ::socket(ai->ai_family, ai->ai_socktype, ai->ai_protocol);
      if (fd_ < 0) continue;
      if (::connect(fd_, ai->ai_addr, ai->ai_addrlen) == 0) break;
      ::close(fd_);
      fd_ = -1;
    }
    ::freeaddrinfo(found);
    if (fd_ < 0) throw ModelUnavailable("cannot connect to " + host + ":" + port);
    reader_ = std::make_unique<detail::LineReader>(fd_);
  }

  SocketChannel(const SocketChannel&) = delete;
  SocketChannel& operator=(const SocketChannel&) = delete;
  ~SocketChannel() override {
    if (fd_ >= 0) ::close(fd_);
  }

  void send(const std::string& line) override { detail::write_all(fd_, line + "\n"); }
  std::string receive(std::chrono::milliseconds timeout) override {
    return reader_->read_line(timeout);
  }

 private:
  int fd_ = -1;
  std::unique_ptr<detail::LineReader> reader_;
};

/// Where a remote model lives: a command to spawn, or "tcp://host:port".
struct Endpoint {
  std::vector<std::string> command;
  std::string host;
  std::string port;
  std::chrono::milliseconds timeout = kDefaultTimeout;

  static Endpoint parse(const std::string& spec) {
    Endpoint e;
    constexpr std::string_view tcp = "tcp://";
    if (spec.starts_with(tcp)) {
      const auto rest = spec.substr(tcp.size());
      const auto colon = rest.rfind(':');
      if (colon == std::string::npos) throw ConfigError("endpoint '" + spec + "' lacks a port");
      e.host = rest.substr(0, colon);
      e.port = rest.substr(colon + 1);
      return e;
    }
    std::istringstream words(spec);
    for (std::string w; words >> w;) e.command.push_back(w);
    if (e.command.empty()) throw ConfigError("empty endpoint");
    return e;
  }

  std::unique_ptr<Channel> open() const {
    if (!command.empty()) return std::make_unique<ChildProcessChannel>(command);
    return std::make_unique<SocketChannel>(host, port);
  }
};

struct Handshake {
  std::string identity;
  std::string boundary = "prefix";
  std::string marker = std::string(kDefaultMarker);
  Token eos{0, std::string(kEosText)};
  std::size_t vocab_size = 0;
  std::vector<std::string> roles;
};

/// Lockstep JSON-lines client. Thread-safe: concurrent callers queue.
class Client {
 public:
  Client(std::unique_ptr<Channel> channel, std::chrono::milliseconds timeout = kDefaultTimeout)
      : channel_(std::move(channel)), timeout_(timeout) {}

  json call(const std::string& method, json params) {
    std::lock_guard lock(mutex_);
    const auto id = ++next_id_;
    json request = json::object();
    request["id"] = id;
    request["method"] = method;
    request["params"] = std::move(params);
    channel_->send(request.dump());
    const std::string frame = channel_->receive(timeout_);
    json response;
    try {
      response = json::parse(frame);
    } catch (const json::exception&) {
      throw MalformedResponse("response to '" + method + "' is not JSON", frame);
    }
    if (!response.is_object() || !response.contains("id") || response["id"] != id) {
      throw MalformedResponse("response to '" + method + "' does not echo request id " +
                                  std::to_string(id),
                              frame);
    }
    if (response.contains("error")) {
      const auto& err = response["error"];
      throw ModelUnavailable("endpoint error on '" + method + "': " +
                             (err.is_object() ? err.value("message", err.dump()) : err.dump()));
    }
    if (!response.contains("result")) {
      throw MalformedResponse("response to '" + method + "' has no result", frame);
    }
    last_frame_ = frame;
    return response["result"];
  }

  Handshake handshake() {
    const auto r = call("handshake", json::object());
    Handshake h;
    try {
      h.identity = r.at("identity").get<std::string>();
      h.boundary = r.value("boundary", std::string("prefix"));
      h.marker = r.value("marker", std::string(kDefaultMarker));
      h.eos = Token{r.at("eos_id").get<TokenId>(), r.value("eos", std::string(kEosText))};
      h.vocab_size = r.value("vocab_size", std::size_t{0});
      h.roles = r.value("roles", std::vector<std::string>{});
    } catch (const json::exception& e) {
      throw HandshakeFailure(std::string("malformed handshake: ") + e.what());
    }
    if (h.boundary != "prefix") {
      throw HandshakeFailure("unsupported boundary convention '" + h.boundary + "'");
    }
    if (h.marker.empty()) throw HandshakeFailure("handshake advertises an empty marker");
    return h;
  }

  /// The most recent accepted response line, for diagnostics.
  const std::string& last_frame() const { return last_frame_; }

 private:
  std::unique_ptr<Channel> channel_;
  std::chrono::milliseconds timeout_;
  std::mutex mutex_;
  std::uint64_t next_id_ = 0;
  std::string last_frame_;
};

inline std::shared_ptr<Client> connect(const Endpoint& endpoint) {
  return std::make_shared<Client>(endpoint.open(), endpoint.timeout);
}

namespace detail {

[[noreturn]] inline void malformed(const std::string& what, const json& result) {
  throw MalformedResponse(what, result.dump());
}

inline std::vector<double> logprob_array(const json& array, const json& result) {
  if (!array.is_array()) malformed("logprobs must be an array", result);
  std::vector<double> out;
  for (const auto& v : array) {
    double lp;
    try {
      lp = decode_real(v);
    } catch (const Error&) {
      malformed("logprob is not a number", result);
    }
    if (std::isnan(lp) || lp > 0.0) malformed("logprob " + v.dump() + " is not <= 0", result);
    out.push_back(lp);
  }
  return out;
}

}  // namespace detail

/// Tokenizer owned by the remote side; the engine only queries it.
class RemoteTokenizer final : public Tokenizer {
 public:
  RemoteTokenizer(std::shared_ptr<Client> client, Handshake hs)
      : client_(std::move(client)), hs_(std::move(hs)) {}

  std::vector<Token> tokenize(std::string_view text) const override {
    const auto r = client_->call("tokenize", {{"text", std::string(text)}});
    std::vector<Token> out;
    try {
      const auto ids = r.at("ids").get<std::vector<TokenId>>();
      const auto texts = r.at("texts").get<std::vector<std::string>>();
      if (ids.size() != texts.size()) detail::malformed("ids and texts differ in length", r);
      for (std::size_t i = 0; i < ids.size(); ++i) {
        check_id(ids[i], r);
        if (texts[i].empty()) detail::malformed("empty token text", r);
        out.push_back(Token{ids[i], texts[i]});
      }
    } catch (const json::exception& e) {
      detail::malformed(std::string("bad tokenize response: ") + e.what(), r);
    }
    return out;
  }

  std::string detokenize(std::span<const Token> tokens) const override {
    const auto r = client_->call("detokenize", {{"ids", ids_of(tokens)}});
    if (!r.contains("text") || !r["text"].is_string()) detail::malformed("detokenize lacks text", r);
    return r["text"].get<std::string>();
  }

  bool starts_new_word(const Token& token) const override {
    return token.id == hs_.eos.id || token.text.starts_with(hs_.marker);
  }

  const Token& eos() const override { return hs_.eos; }
  std::size_t vocab_size() const override { return hs_.vocab_size; }
  std::string_view marker() const override { return hs_.marker; }

  void check_id(TokenId id, const json& r) const {
    if (id < 0 || (hs_.vocab_size && static_cast<std::size_t>(id) >= hs_.vocab_size)) {
      detail::malformed("token id " + std::to_string(id) + " outside the vocabulary", r);
    }
  }

 private:
  std::shared_ptr<Client> client_;
  Handshake hs_;
};

/// A Scorer whose calls travel over the protocol. Responses are validated
/// against the ScoredDistribution invariants.
class RemoteScorer final : public Scorer {
 public:
  explicit RemoteScorer(std::shared_ptr<Client> client)
      : client_(std::move(client)), hs_(client_->handshake()), tokenizer_(client_, hs_) {}

  std::string identity() const override { return hs_.identity; }
  const Tokenizer& tokenizer() const override { return tokenizer_; }
  bool concurrent_safe() const override { return false; }
  const Handshake& handshake() const { return hs_; }

  ScoredDistribution next_distribution(const ModelInput& input, std::span<const Token> prefix,
                                       std::size_t k) const override {
    const auto r = client_->call(
        "next_distribution", {{"payload", input.payload}, {"ids", ids_of(prefix)}, {"k", k}});
    ScoredDistribution out;
    out.truncated_to = k;
    if (!r.contains("entries") || !r["entries"].is_array()) detail::malformed("no entries", r);
    for (const auto& cell : r["entries"]) {
      if (!cell.is_array() || cell.size() != 3 || !cell[0].is_number_integer() ||
          !cell[1].is_string()) {
        detail::malformed("entry must be [id, text, logprob]", r);
      }
      const auto id = cell[0].get<TokenId>();
      tokenizer_.check_id(id, r);
      const auto lp = detail::logprob_array(json::array({cell[2]}), r).front();
      auto text = cell[1].get<std::string>();
      if (text.empty()) detail::malformed("empty token text", r);
      out.entries.push_back({Token{id, std::move(text)}, lp});
    }
    if (out.entries.size() > k) detail::malformed("more than k entries", r);
    for (std::size_t i = 1; i < out.entries.size(); ++i) {
      if (!distribution_order(out.entries[i - 1], out.entries[i])) {
        detail::malformed("entries are not sorted by logprob, then id", r);
      }
    }
    return out;
  }

  std::vector<double> score_prefix(const ModelInput& input,
                                   std::span<const Token> tokens) const override {
    const auto r =
        client_->call("score_prefix", {{"payload", input.payload}, {"ids", ids_of(tokens)}});
    if (!r.contains("logprobs")) detail::malformed("no logprobs", r);
    auto lps = detail::logprob_array(r["logprobs"], r);
    if (lps.size() != tokens.size()) detail::malformed("one logprob per token expected", r);
    return lps;
  }

 private:
  std::shared_ptr<Client> client_;
  Handshake hs_;
  RemoteTokenizer tokenizer_;
};

/// Selector served over the protocol. Any failure surfaces as
/// SelectorUnavailable so select_best can fall back.
class RemoteSelector final : public Selector {
 public:
  explicit RemoteSelector(std::shared_ptr<Client> client) : client_(std::move(client)) {
    try {
      identity_ = client_->handshake().identity;
    } catch (const Error& e) {
      throw SelectorUnavailable(e.what());
    }
  }

  std::string identity() const override { return identity_; }

  std::vector<double> select(const std::string& payload,
                             std::span<const std::string> surfaces) const override {
    try {
      const auto r = client_->call(
          "select", {{"payload", payload},
                     {"surfaces", std::vector<std::string>(surfaces.begin(), surfaces.end())}});
      std::vector<double> scores;
      for (const auto& v : r.at("scores")) scores.push_back(decode_real(v));
      return scores;
    } catch (const SelectorUnavailable&) {
      throw;
    } catch (const std::exception& e) {
      throw SelectorUnavailable(e.what());
    }
  }

 private:
  std::shared_ptr<Client> client_;
  std::string identity_;
};

/// Serves a Scorer (and optionally a Selector) over the protocol.
class Server {
 public:
  Server(const Scorer* scorer, const Selector* selector = nullptr)
      : scorer_(scorer), selector_(selector) {}

  /// Response line for one request line.
  std::string handle(const std::string& line) const {
    json request;
    try {
      request = json::parse(line);
    } catch (const json::exception&) {
      return error_frame(nullptr, "bad_request", "request is not JSON");
    }
    const json id = request.is_object() && request.contains("id") ? request["id"] : json(nullptr);
    if (!request.is_object() || !request.contains("method") || !request["method"].is_string()) {
      return error_frame(id, "bad_request", "request lacks a method");
    }
    const auto method = request["method"].get<std::string>();
    const json params = request.value("params", json::object());
    try {
      json response = json::object();
      response["id"] = id;
      response["result"] = dispatch(method, params);
      return response.dump();
    } catch (const UnknownMethod& e) {
      return error_frame(id, "unknown_method", e.what());
    } catch (const json::exception& e) {
      return error_frame(id, "bad_request", e.what());
    } catch (const std::exception& e) {
      return error_frame(id, "model_error", e.what());
    }
  }

  void serve(std::istream& in, std::ostream& out) const {
    for (std::string line; std::getline(in, line);) {
      if (!line.empty() && line.back() == '\r') line.pop_back();
      if (line.empty()) continue;
      out << handle(line) << '\n';
      out.flush();
    }
  }

  /// Accepts connections on `port` (0 picks one) one at a time, forever or
  /// until `max_connections` have been served. `on_listen` receives the bound
  /// port before the first accept.
  template <class OnListen>
  void serve_socket(int port, OnListen&& on_listen, std::size_t max_connections = 0) const {
    detail::ignore_sigpipe();
    const int listener = ::socket(AF_INET, SOCK_STREAM, 0);
    if (listener < 0) throw Error("socket() failed");
    const int yes = 1;
    ::setsockopt(listener, SOL_SOCKET, SO_REUSEADDR, &yes, sizeof yes);
    sockaddr_in addr{};
    addr.sin_family = AF_INET;
    addr.sin_addr.s_addr = htonl(INADDR_LOOPBACK);
    addr.sin_port = htons(static_cast<uint16_t>(port));
    if (::bind(listener, reinterpret_cast<sockaddr*>(&addr), sizeof addr) != 0 ||
        ::listen(listener, 4) != 0) {
      ::close(listener);
      throw Error(std::string("cannot listen: ") + std::strerror(errno));
    }
    socklen_t len = sizeof addr;
    ::getsockname(listener, reinterpret_cast<sockaddr*>(&addr), &len);
    on_listen(static_cast<int>(ntohs(addr.sin_port)));
    for (std::size_t served = 0; max_connections == 0 || served < max_connections; ++served) {
      const int conn = ::accept(listener, nullptr, nullptr);
      if (conn < 0) continue;
      detail::LineReader reader(conn);
      try {
        for (;;) {
          const auto line = reader.read_line(std::chrono::hours(24));
          if (line.empty()) continue;
          detail::write_all(conn, handle(line) + "\n");
        }
      } catch (const Error&) {
        // client went away
      }
      ::close(conn);
    }
    ::close(listener);
  }

 private:
  struct UnknownMethod : std::runtime_error {
    using std::runtime_error::runtime_error;
  };

  static std::string error_frame(const json& id, const std::string& code,
                                 const std::string& message) {
    json frame = json::object();
    frame["id"] = id;
    frame["error"] = {{"code", code}, {"message", message}};
    return frame.dump();
  }

  const Scorer& scorer() const {
    if (!scorer_) throw Error("this endpoint serves no scorer");
    return *scorer_;
  }

  std::vector<Token> tokens_of(const json& ids) const {
    const auto* vocab = dynamic_cast<const VocabTokenizer*>(&scorer().tokenizer());
    std::vector<Token> out;
    for (const auto& v : ids) {
      const auto id = v.get<TokenId>();
      if (vocab) {
        out.push_back(vocab->token(id));
      } else {
        out.push_back(Token{id, {}});
      }
    }
    return out;
  }

  json dispatch(const std::string& method, const json& params) const {
    if (method == "handshake") {
      json r = json::object();
      std::vector<std::string> roles;
      if (scorer_) roles.push_back("scorer");
      if (selector_) roles.push_back("selector");
      r["identity"] = scorer_ ? scorer_->identity() : selector_ ? selector_->identity() : "";
      r["boundary"] = "prefix";
      r["marker"] = scorer_ ? std::string(scorer_->tokenizer().marker()) : std::string(kDefaultMarker);
      r["eos"] = scorer_ ? scorer_->tokenizer().eos().text : std::string(kEosText);
      r["eos_id"] = scorer_ ? scorer_->tokenizer().eos().id : 0;
      r["vocab_size"] = scorer_ ? scorer_->tokenizer().vocab_size() : 0;
      r["protocol"] = kVersion;
      r["roles"] = roles;
      return r;
    }
    if (method == "tokenize") {
      const auto tokens = scorer().tokenizer().tokenize(params.at("text").get<std::string>());
      json ids = json::array();
      json texts = json::array();
      for (const auto& t : tokens) {
        ids.push_back(t.id);
        texts.push_back(t.text);
      }
      return {{"ids", ids}, {"texts", texts}};
    }
    if (method == "detokenize") {
      return {{"text", scorer().tokenizer().detokenize(tokens_of(params.at("ids")))}};
    }
    if (method == "score_prefix") {
      const ModelInput input{params.at("payload").get<std::string>()};
      json lps = json::array();
      for (double lp : scorer().score_prefix(input, tokens_of(params.at("ids")))) {
        lps.push_back(encode_real(lp));
      }
      return {{"logprobs", lps}};
    }
    if (method == "next_distribution") {
      const ModelInput input{params.at("payload").get<std::string>()};
      const auto k = params.at("k").get<std::size_t>();
      if (k == 0) throw Error("k must be at least 1");
      const auto dist = scorer().next_distribution(input, tokens_of(params.at("ids")), k);
      json entries = json::array();
      for (const auto& e : dist.entries) {
        entries.push_back(json::array({e.token.id, e.token.text, encode_real(e.logprob)}));
      }
      return {{"entries", entries}};
    }
    if (method == "select") {
      if (!selector_) throw Error("this endpoint serves no selector");
      const auto surfaces = params.at("surfaces").get<std::vector<std::string>>();
      json scores = json::array();
      for (double s : selector_->select(params.at("payload").get<std::string>(), surfaces)) {
        scores.push_back(encode_real(s));
      }
      return {{"scores", scores}};
    }
    throw UnknownMethod("unknown method '" + method + "'");
  }

  const Scorer* scorer_;
  const Selector* selector_;
};

}  // namespace wordfuse::protocol
