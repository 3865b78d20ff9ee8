use serde::{Deserialize, Serialize};

use super::Mode;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum Direction {
    /// Server to client.
    Down,
    /// Client to server.
    Up,
}

/// One metered message. Round 0 is the initial backbone distribution.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LedgerEntry {
    pub round: u32,
    pub direction: Direction,
    pub client_id: u32,
    pub bytes: u64,
}

/// Every byte exchanged during a federation run.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CommLedger {
    pub entries: Vec<LedgerEntry>,
    /// Serialized backbone size.
    pub h_theta: u64,
    /// Serialized adapter size (0 when the model has no adapter).
    pub h_delta: u64,
}

impl CommLedger {
    pub fn new(h_theta: u64, h_delta: u64) -> Self {
        CommLedger {
            entries: Vec::new(),
            h_theta,
            h_delta,
        }
    }

    pub fn total(&self) -> u64 {
        self.entries.iter().map(|e| e.bytes).sum()
    }

    pub fn total_in(&self, direction: Direction) -> u64 {
        self.entries
            .iter()
            .filter(|e| e.direction == direction)
            .map(|e| e.bytes)
            .sum()
    }

    /// Bytes of one round in one direction.
    pub fn round_total(&self, round: u32, direction: Direction) -> u64 {
        self.entries
            .iter()
            .filter(|e| e.round == round && e.direction == direction)
            .map(|e| e.bytes)
            .sum()
    }
}

/// In-process message passing with per-message byte metering.
#[derive(Clone, Debug, Default)]
pub struct SimTransport {
    ledger: CommLedger,
}

impl SimTransport {
    pub fn new(h_theta: u64, h_delta: u64) -> Self {
        SimTransport {
            ledger: CommLedger::new(h_theta, h_delta),
        }
    }

    /// Records the message and hands the same bytes to the receiver.
    pub fn send<'a>(&mut self, round: u32, direction: Direction, client_id: u32, message: &'a [u8]) -> &'a [u8] {
        self.ledger.entries.push(LedgerEntry {
            round,
            direction,
            client_id,
            bytes: message.len() as u64,
        });
        message
    }

    pub fn ledger(&self) -> &CommLedger {
        &self.ledger
    }

    pub fn into_ledger(self) -> CommLedger {
        self.ledger
    }
}

/// Closed-form communication cost in bytes:
/// FULL `H_θ·|C| + 2·H_θ·|C|·r`, LORA `H_θ·|C| + 2·H_δ·|C|·r`.
pub fn predicted_cost(h_theta: u64, h_delta: u64, num_clients: u64, rounds: u64, mode: Mode) -> u64 {
    let per_round = match mode {
        Mode::Full => h_theta,
        Mode::Lora => h_delta,
    };
    h_theta * num_clients + 2 * per_round * num_clients * rounds
}

/// [`predicted_cost`] over reals, for sizes quoted in fractional units.
pub fn predicted_cost_real(h_theta: f64, h_delta: f64, num_clients: f64, rounds: f64, mode: Mode) -> f64 {
    let per_round = match mode {
        Mode::Full => h_theta,
        Mode::Lora => h_delta,
    };
    h_theta * num_clients + 2.0 * per_round * num_clients * rounds
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn worked_example() {
        assert_eq!(predicted_cost(10, 1, 3, 5, Mode::Full), 330);
        assert_eq!(predicted_cost(10, 1, 3, 5, Mode::Lora), 60);
        assert_eq!(predicted_cost(10, 1, 3, 0, Mode::Full), 30);
        assert_eq!(predicted_cost(10, 1, 3, 0, Mode::Lora), 30);
        assert_eq!(predicted_cost_real(10.0, 1.0, 3.0, 5.0, Mode::Lora), 60.0);
    }

    #[test]
    fn transport_meters_every_message() {
        let mut t = SimTransport::new(10, 1);
        let msg = vec![7u8; 10];
        assert_eq!(t.send(0, Direction::Down, 0, &msg), &msg[..]);
        t.send(1, Direction::Up, 0, &msg[..3]);
        let l = t.into_ledger();
        assert_eq!(l.total(), 13);
        assert_eq!(l.total_in(Direction::Up), 3);
        assert_eq!(l.round_total(0, Direction::Down), 10);
    }
}
