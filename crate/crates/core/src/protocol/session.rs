use std::collections::{BTreeMap, HashMap};

use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;

use super::parties::{ActiveInit, ActiveParty, Aggregator, KeyRing, PassiveParty};
use super::{roc_auc, ClusterInfo, Mode, ProtocolError, RoundReport, SessionConfig, TestReport, Topology};
use crate::data::Shards;
use crate::masking::FixedPointCodec;
use crate::model::{uniform_init, Checkpoint, GlobalModule};
use crate::transport::{Network, PartyKind, Phase, TrafficMeter};

type Result<T> = std::result::Result<T, ProtocolError>;

/// Party data for a session. The active shard's features may already be
/// pre-trained embeddings.
#[derive(Debug, Clone)]
pub struct SessionData {
    pub shards: Shards,
    pub train_ids: Vec<u64>,
    pub test_ids: Vec<u64>,
}

/// Drives every party through setup, training and testing in lock-step
/// over one in-process network.
pub struct Session {
    config: SessionConfig,
    topo: Topology,
    net: Network,
    active: ActiveParty,
    passive: Vec<PassiveParty>,
    aggregator: Aggregator,
    train_ids: Vec<u64>,
    test_ids: Vec<u64>,
    active_columns: Vec<usize>,
    cluster_columns: BTreeMap<u16, Vec<usize>>,
    iteration: u32,
    key_epoch: Option<u64>,
}

fn rng(seed: u64, stream: u64) -> ChaCha20Rng {
    let mut r = ChaCha20Rng::seed_from_u64(seed);
    r.set_stream(stream);
    r
}

impl Session {
    pub fn new(config: SessionConfig, data: SessionData) -> Result<Self> {
        let bad = |m: &str| Err(ProtocolError::Config(m.into()));
        if config.batch_size == 0 {
            return bad("batch_size must be positive");
        }
        if config.rotation_period == 0 {
            return bad("rotation_period must be positive");
        }
        if config.hidden == 0 {
            return bad("hidden must be positive");
        }
        if !(config.lr.is_finite() && config.lr > 0.0) {
            return bad("lr must be a positive number");
        }
        if data.train_ids.is_empty() {
            return bad("no training samples");
        }
        let shards = data.shards;

        let mut by_cluster: BTreeMap<u16, Vec<usize>> = BTreeMap::new();
        for (k, s) in shards.passive.iter().enumerate() {
            let Some(c) = s.cluster else {
                return bad("passive shard without a cluster");
            };
            if s.party == 0 {
                return bad("party 0 is reserved for the active party");
            }
            by_cluster.entry(c).or_default().push(k);
        }
        let d_active = shards.active.features.ncols();
        let mut next = d_active;
        let mut clusters = Vec::new();
        let mut cluster_columns = BTreeMap::new();
        for (&id, members) in &by_cluster {
            let first = &shards.passive[members[0]];
            let width = first.features.ncols();
            if members.iter().any(|&k| shards.passive[k].features.ncols() != width) {
                return Err(ProtocolError::Config(format!("cluster {id} members disagree on width")));
            }
            cluster_columns.insert(id, first.columns.clone());
            clusters.push(ClusterInfo {
                id,
                members: members.iter().map(|&k| shards.passive[k].party).collect(),
                rows: next..next + width,
            });
            next += width;
        }
        let aggregator = shards.passive.iter().map(|s| s.party).max().unwrap_or(0) + 1;
        let topo = Topology {
            aggregator,
            clusters,
            active_rows: 0..d_active,
        };

        let mut parties: Vec<(u16, PartyKind)> = vec![(0, PartyKind::Active), (aggregator, PartyKind::Aggregator)];
        parties.extend(topo.passive().into_iter().map(|p| (p, PartyKind::Passive)));
        if parties.len() != shards.passive.len() + 2 {
            return bad("duplicate passive party index");
        }
        let net = Network::new(&parties);

        let codec = FixedPointCodec::new(config.scale_bits, topo.clients().len() as u32);
        let holder: HashMap<(u16, u64), u16> = shards
            .passive
            .iter()
            .flat_map(|s| s.ids.iter().map(move |&id| ((s.cluster.unwrap(), id), s.party)))
            .collect();
        let weights = uniform_init(&mut rng(config.seed, 0), topo.total_rows(), config.hidden);
        let active = ActiveParty::new(ActiveInit {
            topo: topo.clone(),
            ids: shards.active.ids.clone(),
            features: shards.active.features,
            labels: shards.labels,
            weights,
            holder,
            batch_rng: rng(config.seed, 1),
            key_rng: rng(config.seed, 2),
            mode: config.mode,
            codec,
            lr: config.lr,
        });
        let passive = shards
            .passive
            .into_iter()
            .map(|s| {
                PassiveParty::new(
                    s.party,
                    topo.clone(),
                    &s.ids,
                    s.features,
                    rng(config.seed, 16 + s.party as u64),
                    config.mode,
                    codec,
                )
            })
            .collect();
        let aggregator = Aggregator::new(
            topo.clone(),
            GlobalModule::init(config.hidden, config.seed.wrapping_add(1)),
            config.mode,
            codec,
            config.lr,
        );
        Ok(Session {
            config,
            topo,
            net,
            active,
            passive,
            aggregator,
            train_ids: data.train_ids,
            test_ids: data.test_ids,
            active_columns: shards.active.columns,
            cluster_columns,
            iteration: 0,
            key_epoch: None,
        })
    }

    pub fn config(&self) -> &SessionConfig {
        &self.config
    }

    pub fn topology(&self) -> &Topology {
        &self.topo
    }

    pub fn network(&self) -> &Network {
        &self.net
    }

    pub fn active(&self) -> &ActiveParty {
        &self.active
    }

    pub fn passive(&self) -> &[PassiveParty] {
        &self.passive
    }

    pub fn aggregator(&self) -> &Aggregator {
        &self.aggregator
    }

    pub fn test_ids(&self) -> &[u64] {
        &self.test_ids
    }

    /// Training rounds and testing batches run so far.
    pub fn iteration(&self) -> u32 {
        self.iteration
    }

    pub fn epoch(&self) -> u64 {
        (self.iteration / self.config.rotation_period) as u64
    }

    fn key_ring(&self, party: u16) -> Option<&KeyRing> {
        if party == 0 {
            return Some(self.active.keys());
        }
        self.passive.iter().find(|p| p.index() == party).map(|p| p.keys())
    }

    /// Runs key agreement for the current epoch, replacing all pairwise keys.
    pub fn run_setup_phase(&mut self) -> Result<()> {
        let (epoch, round) = (self.epoch(), self.iteration);
        let net = &self.net;
        let agg = self.topo.aggregator;
        net.time(agg, || self.aggregator.request_keys(net, epoch, round))?;
        net.time(0, || self.active.offer_keys(net, epoch, round))?;
        for p in &mut self.passive {
            net.time(p.index(), || p.offer_keys(net, epoch, round))?;
        }
        net.time(agg, || self.aggregator.relay_keys(net, epoch, round))?;
        net.time(0, || self.active.accept_keys(net, epoch, round))?;
        for p in &mut self.passive {
            net.time(p.index(), || p.accept_keys(net, epoch, round))?;
        }
        self.key_epoch = Some(epoch);
        Ok(())
    }

    fn ensure_keys(&mut self) -> Result<bool> {
        if self.config.mode == Mode::Secured && self.key_epoch != Some(self.epoch()) {
            self.run_setup_phase()?;
            return Ok(true);
        }
        Ok(false)
    }

    /// Checks that both ends of every client pair derived the same keys.
    /// Returns the number of pairs, or the first pair that disagrees.
    pub fn verify_pairwise_keys(&self) -> std::result::Result<usize, (u16, u16)> {
        let clients = self.topo.clients();
        let mut pairs = 0;
        for (k, &i) in clients.iter().enumerate() {
            for &j in &clients[k + 1..] {
                let a = self.key_ring(i).and_then(|r| r.get(j));
                let b = self.key_ring(j).and_then(|r| r.get(i));
                if a.is_none() || a != b {
                    return Err((i, j));
                }
                pairs += 1;
            }
        }
        Ok(pairs)
    }

    /// Feeds a batch through the forward pass, up to the aggregated hidden layer.
    fn forward(&mut self, batch: Vec<u64>, training: bool, send_weights: bool) -> Result<()> {
        let (epoch, round) = (self.epoch(), self.iteration);
        let net = &self.net;
        let agg = self.topo.aggregator;
        net.time(0, || self.active.start_round(net, batch, training, send_weights, epoch, round))?;
        net.time(agg, || self.aggregator.relay_batch(net, epoch, round))?;
        for p in &mut self.passive {
            net.time(p.index(), || {
                p.receive_batch(net, round)?;
                p.send_activation(net, epoch, round)
            })?;
        }
        net.time(0, || self.active.send_activation(net, epoch, round))
    }

    pub fn run_training_round(&mut self) -> Result<RoundReport> {
        let before = self.net.meter();
        let setup = self.ensure_keys()?;
        let (epoch, round) = (self.epoch(), self.iteration);
        let b = self.config.batch_size;
        let batch = self.net.time(0, || self.active.select_batch(&self.train_ids, b));
        self.forward(batch.clone(), true, true)?;

        let net = &self.net;
        let agg = self.topo.aggregator;
        net.time(agg, || self.aggregator.train_step(net, epoch, round))?;
        for p in &self.passive {
            net.time(p.index(), || p.send_gradient(net, epoch, round))?;
        }
        net.time(agg, || self.aggregator.backward_step(net, epoch, round))?;
        let loss = net.time(0, || self.active.finish_round(net, epoch, round))?;
        self.iteration += 1;

        let after = self.net.meter();
        let (bytes, cpu_ms) = self.deltas(&before, &after, Phase::Training);
        Ok(RoundReport {
            round,
            epoch,
            setup,
            loss,
            batch_ids: batch,
            passive_views: self
                .passive
                .iter()
                .map(|p| (p.index(), p.view().iter().map(|&(_, id)| id).collect()))
                .collect(),
            bytes,
            cpu_ms,
        })
    }

    pub fn train(&mut self, rounds: usize) -> Result<Vec<RoundReport>> {
        (0..rounds).map(|_| self.run_training_round()).collect()
    }

    /// Masked inference over `ids` in batches; only the active party sees
    /// the predictions. Weight slices are shipped once at the start.
    pub fn run_testing_phase(&mut self, ids: &[u64]) -> Result<TestReport> {
        self.net.set_phase(Phase::Testing);
        let result = self.testing_batches(ids);
        self.net.set_phase(Phase::Training);
        let (probabilities, batches) = result?;
        let labels: Vec<f64> = ids
            .iter()
            .map(|&id| self.active.label_of(id).expect("checked when the batch was announced"))
            .collect();
        let correct = probabilities
            .iter()
            .zip(&labels)
            .filter(|(&p, &y)| (p >= 0.5) == (y >= 0.5))
            .count();
        Ok(TestReport {
            ids: ids.to_vec(),
            accuracy: if ids.is_empty() { f64::NAN } else { correct as f64 / ids.len() as f64 },
            auc: roc_auc(&probabilities, &labels),
            probabilities,
            labels,
            batches,
        })
    }

    fn testing_batches(&mut self, ids: &[u64]) -> Result<(Vec<f64>, usize)> {
        let mut probs = Vec::with_capacity(ids.len());
        let mut batches = 0;
        for chunk in ids.chunks(self.config.batch_size) {
            self.ensure_keys()?;
            let (epoch, round) = (self.epoch(), self.iteration);
            self.forward(chunk.to_vec(), false, batches == 0)?;
            let net = &self.net;
            let agg = self.topo.aggregator;
            net.time(agg, || self.aggregator.predict_step(net, epoch, round))?;
            probs.extend(net.time(0, || self.active.receive_predictions(net, round))?);
            self.iteration += 1;
            batches += 1;
        }
        Ok((probs, batches))
    }

    fn deltas(&self, before: &TrafficMeter, after: &TrafficMeter, phase: Phase) -> (BTreeMap<u16, u64>, BTreeMap<u16, f64>) {
        let mut bytes = BTreeMap::new();
        let mut cpu = BTreeMap::new();
        for (p, _) in self.net.parties() {
            bytes.insert(p, after.transmitted(p, phase) - before.transmitted(p, phase));
            cpu.insert(p, (after.cpu(p, phase) - before.cpu(p, phase)).as_secs_f64() * 1e3);
        }
        (bytes, cpu)
    }

    /// Current model parameters. Weight blocks record their encoded columns.
    pub fn checkpoint(&self) -> Checkpoint {
        let w = self.active.weights();
        let h = w.ncols();
        let block = |rows: std::ops::Range<usize>| w.slice(ndarray::s![rows, ..]).iter().copied().collect::<Vec<f64>>();
        let mut ck = Checkpoint::default();
        let ar = self.topo.active_rows.clone();
        ck.push("active.weights", &[ar.len(), h], block(ar), Some(self.active_columns.clone()));
        ck.push("active.bias", &[h], self.active.bias().to_vec(), None);
        for c in &self.topo.clusters {
            ck.push(
                &format!("cluster{}.weights", c.id),
                &[c.rows.len(), h],
                block(c.rows.clone()),
                Some(self.cluster_columns[&c.id].clone()),
            );
        }
        let g = self.aggregator.global();
        ck.push("global.weights", &[h], g.weights.to_vec(), None);
        ck.push("global.bias", &[1], vec![g.bias], None);
        ck
    }

    /// Loads parameters written by [`Session::checkpoint`]. Shapes must match.
    pub fn restore(&mut self, ck: &Checkpoint) -> Result<()> {
        let h = self.config.hidden;
        let tensor = |name: &str, shape: &[usize]| -> Result<Vec<f64>> {
            let (entry, data) = ck
                .get(name)
                .ok_or_else(|| ProtocolError::Config(format!("checkpoint lacks {name}")))?;
            if entry.shape != shape {
                return Err(ProtocolError::Config(format!(
                    "checkpoint {name} has shape {:?}, session expects {shape:?}",
                    entry.shape
                )));
            }
            Ok(data.clone())
        };
        let mut weights = self.active.weights().clone();
        let mut load_block = |name: &str, rows: std::ops::Range<usize>| -> Result<()> {
            let data = tensor(name, &[rows.len(), h])?;
            let block = ndarray::Array2::from_shape_vec((rows.len(), h), data).expect("shape checked");
            weights.slice_mut(ndarray::s![rows, ..]).assign(&block);
            Ok(())
        };
        load_block("active.weights", self.topo.active_rows.clone())?;
        for c in &self.topo.clusters {
            load_block(&format!("cluster{}.weights", c.id), c.rows.clone())?;
        }
        let bias = ndarray::Array1::from(tensor("active.bias", &[h])?);
        let global = GlobalModule {
            weights: ndarray::Array1::from(tensor("global.weights", &[h])?),
            bias: tensor("global.bias", &[1])?[0],
        };
        self.active.set_parameters(weights, bias);
        self.aggregator.set_global(global);
        Ok(())
    }

    pub fn close(&self) {
        self.net.close();
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::crypto::decrypt_sample_ids;
    use crate::data::{encode, split_ids, synth_generate, vertical_split, ColumnSpec, LabelSpec, PartitionSpec, Schema};
    use crate::protocol::wire::read_secured_batch;
    use crate::transport::Tag;

    fn data(n: usize) -> SessionData {
        let schema = Schema {
            columns: vec![
                ColumnSpec::categorical("a", &["x", "y", "z"]),
                ColumnSpec::numeric("b", 0.0, 1.0),
                ColumnSpec::numeric("c", 2.0, 3.0),
                ColumnSpec::categorical("d", &["p", "q"]),
                ColumnSpec::numeric("e", 1.0, 1.0),
            ],
            label: LabelSpec {
                name: "y".into(),
                positive: vec!["1".into()],
            },
            delimiter: None,
        };
        let enc = encode(&synth_generate(n, &schema, 3), &schema, None).unwrap();
        let spec = PartitionSpec::even_split(&["a", "b"], &[&["c"], &["d", "e"]], 2, n as u64);
        let shards = vertical_split(&enc, &spec).unwrap();
        let (train_ids, test_ids) = split_ids(n, 0.75);
        SessionData {
            shards,
            train_ids,
            test_ids,
        }
    }

    fn config(mode: Mode) -> SessionConfig {
        SessionConfig {
            batch_size: 16,
            lr: 0.1,
            rotation_period: 3,
            mode,
            seed: 9,
            hidden: 8,
            scale_bits: 24,
        }
    }

    #[test]
    fn topology_from_shards() {
        let s = Session::new(config(Mode::Secured), data(80)).unwrap();
        let t = s.topology();
        assert_eq!(t.aggregator, 5);
        assert_eq!(t.active_rows, 0..4);
        assert_eq!(t.clusters[0].rows, 4..5);
        assert_eq!(t.clusters[1].rows, 5..8);
        assert_eq!(t.clusters[1].members, vec![3, 4]);
    }

    #[test]
    fn setup_gives_matching_keys_for_every_pair() {
        let mut s = Session::new(config(Mode::Secured), data(80)).unwrap();
        assert!(s.verify_pairwise_keys().is_err());
        s.run_setup_phase().unwrap();
        assert_eq!(s.verify_pairwise_keys(), Ok(10));
        assert_eq!(s.active().keys().epoch(), Some(0));
    }

    #[test]
    fn rotation_every_k_iterations() {
        let mut s = Session::new(config(Mode::Secured), data(80)).unwrap();
        let reports = s.train(7).unwrap();
        let setups: Vec<bool> = reports.iter().map(|r| r.setup).collect();
        assert_eq!(setups, vec![true, false, false, true, false, false, true]);
        assert_eq!(reports[6].epoch, 2);
        assert_eq!(s.active().keys().epoch(), Some(2));
        assert_eq!(s.verify_pairwise_keys(), Ok(10));
        assert!(reports.iter().all(|r| r.loss.is_finite()));
    }

    #[test]
    fn passive_views_are_batch_intersect_own_ids() {
        let mut s = Session::new(config(Mode::Secured), data(80)).unwrap();
        let r = s.run_training_round().unwrap();
        for p in s.passive() {
            let expected: Vec<u64> = r.batch_ids.iter().copied().filter(|&id| p.holds(id)).collect();
            assert_eq!(r.passive_views[&p.index()], expected, "party {}", p.index());
        }
    }

    #[test]
    fn secured_and_plain_agree() {
        let mut sec = Session::new(config(Mode::Secured), data(80)).unwrap();
        let mut pl = Session::new(config(Mode::Plain), data(80)).unwrap();
        for _ in 0..6 {
            let a = sec.run_training_round().unwrap();
            let b = pl.run_training_round().unwrap();
            assert_eq!(a.batch_ids, b.batch_ids);
            assert!((a.loss - b.loss).abs() < 1e-4, "{} vs {}", a.loss, b.loss);
        }
        let diff = (sec.active().weights() - pl.active().weights()).mapv(f64::abs);
        assert!(diff.iter().all(|&d| d <= 16.0 * 2f64.powi(-24)), "max {:?}", diff.iter().cloned().fold(0.0, f64::max));
    }

    #[test]
    fn testing_returns_predictions_to_the_active_party_only() {
        let mut s = Session::new(config(Mode::Secured), data(80)).unwrap();
        s.network().set_capture(true);
        s.train(2).unwrap();
        let ids = s.test_ids().to_vec();
        let rep = s.run_testing_phase(&ids).unwrap();
        assert_eq!(rep.probabilities.len(), 20);
        assert_eq!(rep.batches, 2);
        assert!(rep.probabilities.iter().all(|p| (0.0..=1.0).contains(p)));
        for e in s.network().log() {
            if e.tag == Tag::Prediction {
                assert_eq!(e.receiver, 0);
            }
            if e.tag == Tag::Labels {
                assert_eq!(e.sender, 0);
                assert_eq!(e.receiver, s.topology().aggregator);
            }
        }
        let m = s.network().meter();
        assert!(m.transmitted(0, Phase::Testing) > 0);
        assert_eq!(m.messages(Tag::Labels, crate::transport::Dir::Sent), 2);
    }

    #[test]
    fn old_epoch_ciphertexts_fail_after_rotation() {
        let mut s = Session::new(config(Mode::Secured), data(80)).unwrap();
        s.network().set_capture(true);
        s.train(4).unwrap();
        let env = s
            .network()
            .log()
            .into_iter()
            .find(|e| e.tag == Tag::EncryptedBatch && e.epoch == 0 && e.sender == 0)
            .unwrap();
        let (_, entries) = read_secured_batch(&env.payload).unwrap();
        let p = &s.passive()[0];
        let key = p.keys().get(0).unwrap();
        assert_eq!(key.epoch, 1);
        assert!(entries.iter().all(|e| decrypt_sample_ids(&key.sym_key, e).is_err()));
    }

    #[test]
    fn dropped_activation_is_reported() {
        let mut s = Session::new(config(Mode::Secured), data(80)).unwrap();
        s.network().suppress(3, Tag::MaskedActivation);
        match s.run_training_round() {
            Err(ProtocolError::MissingContribution { round: 0, party: 3, tag }) => {
                assert_eq!(tag, Tag::MaskedActivation)
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn silent_party_times_out_setup() {
        let mut s = Session::new(config(Mode::Secured), data(80)).unwrap();
        s.network().suppress(2, Tag::PubKeySet);
        assert!(matches!(
            s.run_training_round(),
            Err(ProtocolError::SetupTimeout { epoch: 0, party: 2 })
        ));
    }

    #[test]
    fn empty_test_set_gives_empty_predictions() {
        let mut s = Session::new(config(Mode::Secured), data(40)).unwrap();
        let rep = s.run_testing_phase(&[]).unwrap();
        assert!(rep.probabilities.is_empty());
        assert_eq!(rep.batches, 0);
    }

    #[test]
    fn zero_weights_predict_sigmoid_of_bias() {
        let mut s = Session::new(config(Mode::Secured), data(80)).unwrap();
        let mut ck = s.checkpoint();
        for (entry, values) in &mut ck.tensors {
            values.iter_mut().for_each(|v| *v = if entry.name == "global.bias" { 0.7 } else { 0.0 });
        }
        s.restore(&ck).unwrap();
        let ids = s.test_ids().to_vec();
        let rep = s.run_testing_phase(&ids).unwrap();
        let expected = crate::model::sigmoid(0.7);
        assert!(rep.probabilities.iter().all(|&p| (p - expected).abs() < 1e-12));
    }

    #[test]
    fn restore_round_trips_a_checkpoint() {
        let mut a = Session::new(config(Mode::Plain), data(80)).unwrap();
        a.train(3).unwrap();
        let mut b = Session::new(config(Mode::Plain), data(80)).unwrap();
        b.restore(&a.checkpoint()).unwrap();
        assert_eq!(b.checkpoint(), a.checkpoint());
        let mut bad = a.checkpoint();
        bad.tensors.retain(|(e, _)| e.name != "global.bias");
        assert!(b.restore(&bad).is_err());
    }

    #[test]
    fn rejects_bad_config() {
        let mut c = config(Mode::Secured);
        c.batch_size = 0;
        assert!(matches!(Session::new(c, data(40)), Err(ProtocolError::Config(_))));
    }

    #[test]
    fn checkpoint_holds_every_block() {
        let mut s = Session::new(config(Mode::Plain), data(80)).unwrap();
        s.train(1).unwrap();
        let ck = s.checkpoint();
        assert_eq!(ck.get("active.weights").unwrap().0.shape, vec![4, 8]);
        assert_eq!(ck.get("cluster1.weights").unwrap().0.owned_columns, Some(vec![5, 6, 7]));
        assert_eq!(ck.get("global.bias").unwrap().1.len(), 1);
    }
}
