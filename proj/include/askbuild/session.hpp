#pragma once

// Play-session protocol, transport-free. The server feeds raw text frames
// in and writes whatever `emit` receives back out, in order.

#include <functional>
#include <memory>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "askbuild/agent.hpp"

namespace askbuild {

struct LoggedMessage {
    enum class Direction : std::uint8_t { FromClient, ToClient };
    Direction direction;
    nlohmann::json message;
};

namespace protocol {

inline nlohmann::json world(const WorldState& w) { return {{"type", "world"}, {"blocks", blocks_to_json(w)}}; }

inline nlohmann::json agent_action(const BuildAction& a) { return {{"type", "agent_action"}, {"action", action_to_json(a)}}; }

inline nlohmann::json agent_utterance(AgentDecision::Kind k) {
    bool ask = k == AgentDecision::Kind::Ask;
    return {{"type", "agent_utterance"},
            {"category", ask ? "ask" : "others"},
            {"detail", ask ? "ask_for_clarification" : "others"}};
}

inline nlohmann::json error(const std::string& message) { return {{"type", "error"}, {"message", message}}; }

}  // namespace protocol

class Session {
public:
    using Emit = std::function<void(const nlohmann::json&)>;

    Session(std::string id, std::shared_ptr<const Predictor> predictor, std::size_t max_steps = kDefaultMaxSteps)
        : id_(std::move(id)), predictor_(std::move(predictor)), max_steps_(max_steps) {}

    /// Handles one text frame. Every frame gets at least one response.
    void handle_text(const std::string& frame, const Emit& emit) {
        nlohmann::json msg;
        try {
            msg = nlohmann::json::parse(frame);
        } catch (const nlohmann::json::parse_error& e) {
            log_in(nlohmann::json(frame));
            send(protocol::error(std::string("malformed JSON: ") + e.what()), emit);
            return;
        }
        handle(msg, emit);
    }

    void handle(const nlohmann::json& msg, const Emit& emit) {
        log_in(msg);
        if (!msg.is_object() || !msg.contains("type") || !msg["type"].is_string()) {
            send(protocol::error("message needs a string field \"type\""), emit);
            return;
        }
        const std::string type = msg["type"].get<std::string>();
        try {
            if (type == "reset") {
                state_ = {};
                send(protocol::world(state_.world), emit);
            } else if (type == "set_world") {
                if (!msg.contains("blocks")) throw DataError("set_world needs \"blocks\"");
                state_.world = WorldState::from_blocks(blocks_from_json(msg["blocks"]));
                send(protocol::world(state_.world), emit);
            } else if (type == "utterance") {
                if (!msg.contains("text") || !msg["text"].is_string()) throw DataError("utterance needs a string \"text\"");
                utterance(msg["text"].get<std::string>(), emit);
            } else {
                send(protocol::error("unknown message type '" + type + "'"), emit);
            }
        } catch (const std::exception& e) {
            send(protocol::error(e.what()), emit);
        }
    }

    /// Convenience for tests: collects the responses.
    std::vector<nlohmann::json> handle(const nlohmann::json& msg) {
        std::vector<nlohmann::json> out;
        handle(msg, [&](const nlohmann::json& m) { out.push_back(m); });
        return out;
    }

    const std::string& id() const { return id_; }
    const WorldState& world() const { return state_.world; }
    const Dialogue& dialogue() const { return state_.dialogue; }
    const std::vector<LoggedMessage>& event_log() const { return log_; }

private:
    void utterance(const std::string& text, const Emit& emit) {
        AgentDecision d = turn(*predictor_, state_, text, max_steps_,
                               [&](const BuildAction& a, const WorldState&) { send(protocol::agent_action(a), emit); });
        if (d.kind != AgentDecision::Kind::Execute) {
            send(protocol::agent_utterance(d.kind), emit);
            return;
        }
        send(protocol::agent_action(BuildAction::stop()), emit);
        send(protocol::world(state_.world), emit);
    }

    void log_in(const nlohmann::json& m) { log_.push_back({LoggedMessage::Direction::FromClient, m}); }

    void send(const nlohmann::json& m, const Emit& emit) {
        log_.push_back({LoggedMessage::Direction::ToClient, m});
        if (emit) emit(m);
    }

    std::string id_;
    std::shared_ptr<const Predictor> predictor_;
    std::size_t max_steps_;
    AgentState state_;
    std::vector<LoggedMessage> log_;
};

/// Rebuilds the world from a session log using only client resets and
/// set_world requests plus the agent's streamed actions.
inline WorldState replay_event_log(const std::vector<LoggedMessage>& log) {
    WorldState w;
    for (const auto& e : log) {
        const auto& m = e.message;
        if (!m.is_object() || !m.contains("type")) continue;
        const std::string type = m["type"].get<std::string>();
        if (e.direction == LoggedMessage::Direction::FromClient) {
            if (type == "reset") w = {};
            if (type == "set_world" && m.contains("blocks")) {
                try {
                    w = WorldState::from_blocks(blocks_from_json(m["blocks"]));
                } catch (const std::exception&) {
                    // rejected by the session too
                }
            }
        } else if (type == "agent_action") {
            w = apply_action(w, action_from_json(m["action"]));
        }
    }
    return w;
}

}  // namespace askbuild
