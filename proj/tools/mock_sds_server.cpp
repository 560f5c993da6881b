// Stand-in guidance service for smoke runs of `gavatar fit --guidance remote`.

#include <csignal>
#include <iostream>

#include <CLI11.hpp>

#include "gavatar/cli_io.hpp"
#include "gavatar/guidance.hpp"

namespace {
gavatar::guidance::MockSdsServer* g_server = nullptr;
void on_signal(int)
{
    if (g_server) g_server->stop();
}
} // namespace

int main(int argc, char** argv)
{
    CLI::App app{"mock score-distillation service"};
    std::string host = "127.0.0.1", reference;
    int port = 8765;
    int max_side = 2048;
    app.add_option("--host", host)->capture_default_str();
    app.add_option("--port", port)->capture_default_str();
    app.add_option("--reference", reference, "PNG to echo photometric gradients against");
    app.add_option("--max-side", max_side)->capture_default_str();
    CLI11_PARSE(app, argc, argv);

    try {
        gavatar::guidance::MockConfig cfg;
        cfg.max_side = max_side;
        if (!reference.empty()) cfg.reference = gavatar::io::read_png(reference);
        gavatar::guidance::MockSdsServer server(std::move(cfg));
        g_server = &server;
        std::signal(SIGINT, on_signal);
        std::signal(SIGTERM, on_signal);
        std::cerr << "mock_sds_server: listening on " << host << ":" << port << '\n';
        server.run(host, port);
        g_server = nullptr;
    } catch (const std::exception& e) {
        std::cerr << "mock_sds_server: " << e.what() << '\n';
        return 1;
    }
    return 0;
}
