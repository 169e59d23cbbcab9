// Copyright 2026 The biact-sim Authors
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//     http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

#include <boost/asio.hpp>
#include <boost/beast.hpp>
#include <boost/beast/websocket.hpp>
#include <chrono>
#include <fstream>
#include <map>
#include <sstream>
#include <thread>

#include "biact/teleop_bridge.hpp"

namespace biact {
namespace {

namespace net = boost::asio;
namespace beast = boost::beast;
namespace http = beast::http;
namespace websocket = beast::websocket;
using tcp = net::ip::tcp;

std::string content_type(const std::filesystem::path& p) {
  const std::string ext = p.extension().string();
  if (ext == ".html") return "text/html";
  if (ext == ".js" || ext == ".mjs") return "text/javascript";
  if (ext == ".css") return "text/css";
  if (ext == ".json") return "application/json";
  if (ext == ".svg") return "image/svg+xml";
  if (ext == ".png") return "image/png";
  return "application/octet-stream";
}

}  // namespace

struct TeleopServer::Impl {
  Impl(SceneSetup setup, TeleopOptions options, ServerOptions server)
      : session(std::move(setup), std::move(options)), opts(std::move(server)) {}

  TeleopSession session;
  ServerOptions opts;
  net::io_context ioc{1};
  tcp::acceptor acceptor{ioc};
  std::thread io_thread;
  std::thread sim_thread;
  std::atomic<bool> running{false};

  InboundMailbox inbound;
  std::mutex clients_mutex;
  std::map<std::uint64_t, std::weak_ptr<WsClient>> clients;
  std::uint64_t next_id = 1;

  std::atomic<std::int64_t> sim_steps{0};
  std::atomic<std::int64_t> frames_dropped{0};
  std::atomic<std::int64_t> overruns{0};

  void accept();
  void sim_loop();
  std::uint64_t controller_id();
  std::vector<std::shared_ptr<WsClient>> snapshot();
  void forget(std::uint64_t id) {
    std::lock_guard lock(clients_mutex);
    clients.erase(id);
  }
};

/// One connection. Every socket operation runs on the I/O thread; other
/// threads only touch `outbound` and post a wake-up.
class WsClient : public std::enable_shared_from_this<WsClient> {
 public:
  WsClient(tcp::socket socket, TeleopServer::Impl& server, std::uint64_t id)
      : stream_(std::move(socket)), server_(server), id_(id), outbound_(server.opts.outbound_bound) {}

  std::uint64_t id() const { return id_; }

  void run() {
    http::async_read(stream_, buffer_, request_,
                     [self = shared_from_this()](beast::error_code ec, std::size_t) {
                       if (!ec) self->on_request();
                     });
  }

  /// Thread-safe: queue a frame, evicting the oldest when full.
  void deliver(std::string frame) {
    server_.frames_dropped += static_cast<std::int64_t>(outbound_.push(std::move(frame)));
    if (!wake_pending_.exchange(true)) {
      net::post(server_.ioc, [self = shared_from_this()] {
        self->wake_pending_ = false;
        self->write_next();
      });
    }
  }

 private:
  void on_request() {
    if (websocket::is_upgrade(request_)) {
      ws_.emplace(std::move(stream_));
      ws_->text(true);
      ws_->async_accept(request_, [self = shared_from_this()](beast::error_code ec) {
        if (!ec) self->on_open();
      });
      return;
    }
    serve_file();
  }

  void serve_file() {
    auto res = std::make_shared<http::response<http::string_body>>();
    res->version(request_.version());
    res->keep_alive(false);
    std::string target(request_.target());
    if (target.empty() || target == "/") target = "/index.html";
    const auto q = target.find('?');
    if (q != std::string::npos) target.resize(q);
    const bool safe = target.find("..") == std::string::npos;
    std::ifstream in;
    const std::filesystem::path file = server_.opts.ui_dir / target.substr(1);
    if (request_.method() == http::verb::get && safe && !server_.opts.ui_dir.empty()) {
      in.open(file, std::ios::binary);
    }
    if (in) {
      std::ostringstream body;
      body << in.rdbuf();
      res->result(http::status::ok);
      res->set(http::field::content_type, content_type(file));
      res->body() = body.str();
    } else {
      res->result(http::status::not_found);
      res->set(http::field::content_type, "text/plain");
      res->body() = "not found\n";
    }
    res->prepare_payload();
    http::async_write(stream_, *res,
                      [self = shared_from_this(), res](beast::error_code, std::size_t) {
                        beast::error_code ignored;
                        self->stream_.socket().shutdown(tcp::socket::shutdown_both, ignored);
                      });
  }

  void on_open() {
    // The hello frame goes first, before the client can receive state.
    current_ = TeleopSession::hello_frame();
    writing_ = true;
    ws_->async_write(net::buffer(current_), [self = shared_from_this()](beast::error_code ec,
                                                                        std::size_t) {
      self->writing_ = false;
      if (ec) return self->close();
      {
        std::lock_guard lock(self->server_.clients_mutex);
        self->server_.clients[self->id_] = self;
      }
      self->read_next();
      self->write_next();
    });
  }

  void read_next() {
    ws_->async_read(incoming_, [self = shared_from_this()](beast::error_code ec, std::size_t) {
      if (ec) return self->close();
      std::string text = beast::buffers_to_string(self->incoming_.data());
      self->incoming_.consume(self->incoming_.size());
      self->on_message(std::move(text));
      self->read_next();
    });
  }

  void on_message(std::string text) {
    if (server_.controller_id() != id_) {
      deliver(R"({"type":"error","msg":"read-only client: another client controls the scene"})");
      return;
    }
    const bool target = is_target_message(text);
    if (!server_.inbound.push({id_, std::move(text), target})) {
      deliver(R"({"type":"error","msg":"inbound queue full, message dropped"})");
    }
  }

  void write_next() {
    if (writing_ || closed_ || !ws_) return;
    auto next = outbound_.try_pop();
    if (!next) return;
    current_ = std::move(*next);
    writing_ = true;
    ws_->async_write(net::buffer(current_),
                     [self = shared_from_this()](beast::error_code ec, std::size_t) {
                       self->writing_ = false;
                       if (ec) return self->close();
                       self->write_next();
                     });
  }

  void close() {
    if (closed_) return;
    closed_ = true;
    server_.forget(id_);
  }

  beast::tcp_stream stream_;
  std::optional<websocket::stream<beast::tcp_stream>> ws_;
  TeleopServer::Impl& server_;
  std::uint64_t id_;
  beast::flat_buffer buffer_;
  http::request<http::string_body> request_;
  beast::flat_buffer incoming_;
  DropOldestQueue<std::string> outbound_;
  std::atomic<bool> wake_pending_{false};
  std::string current_;
  bool writing_ = false;
  bool closed_ = false;
};

std::uint64_t TeleopServer::Impl::controller_id() {
  std::lock_guard lock(clients_mutex);
  for (const auto& [id, weak] : clients) {
    if (!weak.expired()) return id;
  }
  return 0;
}

std::vector<std::shared_ptr<WsClient>> TeleopServer::Impl::snapshot() {
  std::lock_guard lock(clients_mutex);
  std::vector<std::shared_ptr<WsClient>> out;
  for (const auto& [id, weak] : clients) {
    if (auto c = weak.lock()) out.push_back(std::move(c));
  }
  return out;
}

void TeleopServer::Impl::accept() {
  acceptor.async_accept([this](beast::error_code ec, tcp::socket socket) {
    if (!running) return;
    if (!ec) std::make_shared<WsClient>(std::move(socket), *this, next_id++)->run();
    accept();
  });
}

void TeleopServer::Impl::sim_loop() {
  using clock = std::chrono::steady_clock;
  const auto period = std::chrono::duration_cast<clock::duration>(
      std::chrono::duration<double>(session.loop().plant().scene().dt));
  auto next = clock::now();
  auto send_state = [this](const std::string& frame) {
    for (const auto& c : snapshot()) c->deliver(frame);
  };
  if (auto frame = session.poll_state()) send_state(*frame);
  while (running) {
    for (auto& item : inbound.drain()) {
      const auto replies = session.handle(item.text);
      if (replies.empty()) continue;
      for (const auto& c : snapshot()) {
        if (c->id() != item.client) continue;
        for (const auto& r : replies) c->deliver(r);
      }
    }
    session.step();
    ++sim_steps;
    if (auto frame = session.poll_state()) send_state(*frame);
    next += period;
    const auto now = clock::now();
    if (now - next > std::chrono::milliseconds(50)) {
      ++overruns;
      next = now;
    } else if (next > now) {
      std::this_thread::sleep_until(next);
    }
  }
}

TeleopServer::TeleopServer(SceneSetup setup, TeleopOptions options, ServerOptions server)
    : impl_(std::make_unique<Impl>(std::move(setup), std::move(options), std::move(server))) {}

TeleopServer::~TeleopServer() { stop(); }

int TeleopServer::start() {
  Impl& s = *impl_;
  if (s.running) throw std::logic_error("teleop server already started");
  beast::error_code ec;
  const auto address = net::ip::make_address(s.opts.address, ec);
  if (ec) throw std::runtime_error("teleop: bad address '" + s.opts.address + "'");
  const tcp::endpoint endpoint(address, static_cast<unsigned short>(s.opts.port));
  s.acceptor.open(endpoint.protocol(), ec);
  if (!ec) s.acceptor.set_option(net::socket_base::reuse_address(true), ec);
  if (!ec) s.acceptor.bind(endpoint, ec);
  if (!ec) s.acceptor.listen(net::socket_base::max_listen_connections, ec);
  if (ec) {
    throw std::runtime_error("teleop: cannot listen on " + s.opts.address + ":" +
                             std::to_string(s.opts.port) + ": " + ec.message());
  }
  s.running = true;
  s.accept();
  s.io_thread = std::thread([&s] { s.ioc.run(); });
  s.sim_thread = std::thread([&s] { s.sim_loop(); });
  return s.acceptor.local_endpoint().port();
}

void TeleopServer::stop() {
  Impl& s = *impl_;
  if (!s.running.exchange(false)) return;
  if (s.sim_thread.joinable()) s.sim_thread.join();
  net::post(s.ioc, [&s] {
    beast::error_code ignored;
    s.acceptor.close(ignored);
  });
  s.ioc.stop();
  if (s.io_thread.joinable()) s.io_thread.join();
}

ServerStats TeleopServer::stats() const {
  ServerStats st;
  st.sim_steps = impl_->sim_steps;
  st.frames_dropped = impl_->frames_dropped;
  st.overruns = impl_->overruns;
  st.clients = static_cast<int>(impl_->snapshot().size());
  return st;
}

}  // namespace biact
