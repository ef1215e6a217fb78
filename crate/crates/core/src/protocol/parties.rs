use std::collections::{BTreeMap, HashMap};

use ndarray::{s, Array1, Array2, Axis};
use rand::seq::index::sample;
use rand::{Rng, RngCore};
use rand_chacha::ChaCha20Rng;

use super::wire::{self, Reader, Writer};
use super::{Mode, ProtocolError, Topology};
use crate::crypto::{
    decrypt_sample_ids, derive_epoch_keys, derive_shared_secret, encrypt_sample_ids, pack_nonce,
    CryptoError, EncryptedIdBatch, EpochKeys, KeyPair, KEY_LEN,
};
use crate::masking::{
    compute_mask, mask_values, sum_masked, Direction, FixedPointCodec, MaskStream, Ring,
};
use crate::model::{
    backprop_hidden, bce_loss_and_delta, finish_forward, local_backward, local_forward, sgd_step, sigmoid,
    GlobalModule, ModelShard,
};
use crate::transport::{Envelope, Network, Tag};

type Result<T> = std::result::Result<T, ProtocolError>;

/// Takes the message `tag` for iteration `round` from `from` out of `me`'s inbox.
fn take(net: &Network, me: u16, from: u16, tag: Tag, round: u32) -> Result<Envelope> {
    net.recv(me, |e| e.sender == from && e.tag == tag && e.round == round)?
        .ok_or(ProtocolError::MissingContribution { round, party: from, tag })
}

fn malformed(env: &Envelope) -> ProtocolError {
    ProtocolError::Malformed {
        round: env.round,
        party: env.sender,
        tag: env.tag,
    }
}

fn words_of(env: &Envelope) -> Result<Vec<u64>> {
    let mut r = Reader::new(&env.payload);
    let w = r.words().map_err(|_| malformed(env))?;
    r.end().map_err(|_| malformed(env))?;
    Ok(w)
}

fn masked_words(
    me: u16,
    plain: &[f64],
    mode: Mode,
    codec: &FixedPointCodec,
    group: &[u16],
    keys: &KeyRing,
    stream: MaskStream,
) -> Result<Vec<u64>> {
    match mode {
        Mode::Plain => Ok(wire::f64_words(plain).collect()),
        Mode::Secured => {
            let round = stream.round;
            let mask = compute_mask(me, group, &keys.seeds(), plain.len(), stream)
                .map_err(|source| ProtocolError::Masking { round, party: me, source })?;
            let masked = mask_values(plain, codec, &mask)
                .map_err(|source| ProtocolError::Masking { round, party: me, source })?;
            Ok(masked.into_iter().map(|r| r.0).collect())
        }
    }
}

/// Per-peer key pairs awaiting the peer's public key, and the derived
/// keys of the current epoch.
#[derive(Debug, Default)]
pub struct KeyRing {
    pending: BTreeMap<u16, KeyPair>,
    keys: BTreeMap<u16, EpochKeys>,
}

impl KeyRing {
    pub fn get(&self, peer: u16) -> Option<&EpochKeys> {
        self.keys.get(&peer)
    }

    pub fn epoch(&self) -> Option<u64> {
        self.keys.values().next().map(|k| k.epoch)
    }

    pub fn peers(&self) -> Vec<u16> {
        self.keys.keys().copied().collect()
    }

    pub fn seeds(&self) -> BTreeMap<u16, [u8; KEY_LEN]> {
        self.keys.iter().map(|(&p, k)| (p, k.prg_seed)).collect()
    }

    fn offer<R: RngCore>(&mut self, peers: &[u16], rng: &mut R) -> Vec<(u16, [u8; KEY_LEN])> {
        self.pending.clear();
        peers
            .iter()
            .map(|&p| {
                let kp = KeyPair::from_rng(rng);
                let pk = kp.public_bytes();
                self.pending.insert(p, kp);
                (p, pk)
            })
            .collect()
    }

    /// Replaces the previous epoch's keys. Every offered peer must answer.
    fn accept(&mut self, me: u16, entries: &[(u16, [u8; KEY_LEN])], epoch: u64) -> std::result::Result<(), CryptoError> {
        let mut keys = BTreeMap::new();
        for (peer, pk) in entries {
            let own = self
                .pending
                .get(peer)
                .ok_or(CryptoError::InvalidPublicKey("key from a peer that was not offered one"))?;
            let ss = derive_shared_secret(own, me, pk, *peer)?;
            keys.insert(*peer, derive_epoch_keys(&ss, epoch));
        }
        if keys.len() != self.pending.len() {
            return Err(CryptoError::InvalidPublicKey("a peer's key is missing"));
        }
        self.pending.clear();
        self.keys = keys;
        Ok(())
    }
}

/// Client half of key agreement: answer the aggregator's request with one
/// fresh public key per peer.
fn offer_keys<R: RngCore>(
    net: &Network,
    me: u16,
    topo: &Topology,
    ring: &mut KeyRing,
    rng: &mut R,
    epoch: u64,
    round: u32,
) -> Result<()> {
    take(net, me, topo.aggregator, Tag::PubKeyRequest, round)?;
    let peers: Vec<u16> = topo.clients().into_iter().filter(|&p| p != me).collect();
    let entries = ring.offer(&peers, rng);
    net.send(Envelope::new(
        Tag::PubKeySet,
        me,
        topo.aggregator,
        epoch as u32,
        round,
        wire::public_keys(&entries),
    ))?;
    Ok(())
}

fn accept_keys(net: &Network, me: u16, topo: &Topology, ring: &mut KeyRing, epoch: u64, round: u32) -> Result<()> {
    let env = take(net, me, topo.aggregator, Tag::PubKeyForward, round)?;
    let entries = wire::read_public_keys(&env.payload).map_err(|_| malformed(&env))?;
    ring.accept(me, &entries, epoch)
        .map_err(|source| ProtocolError::Crypto { round, party: me, source })
}

/// Holds the labels, its own features and the whole first layer.
pub struct ActiveParty {
    pub(super) topo: Topology,
    features: Array2<f64>,
    row_of: HashMap<u64, usize>,
    labels: Vec<f64>,
    /// `[total_rows × h]`: the active block followed by every cluster block.
    weights: Array2<f64>,
    bias: Array1<f64>,
    /// `(cluster, sample)` to the member holding it.
    holder: HashMap<(u16, u64), u16>,
    keys: KeyRing,
    batch_rng: ChaCha20Rng,
    key_rng: ChaCha20Rng,
    mode: Mode,
    codec: FixedPointCodec,
    lr: f64,
    batch: Vec<u64>,
    batch_rows: Array2<f64>,
}

pub(super) struct ActiveInit {
    pub topo: Topology,
    pub ids: Vec<u64>,
    pub features: Array2<f64>,
    pub labels: Vec<f64>,
    pub weights: Array2<f64>,
    pub holder: HashMap<(u16, u64), u16>,
    pub batch_rng: ChaCha20Rng,
    pub key_rng: ChaCha20Rng,
    pub mode: Mode,
    pub codec: FixedPointCodec,
    pub lr: f64,
}

impl ActiveParty {
    pub(super) fn new(init: ActiveInit) -> Self {
        let hidden = init.weights.ncols();
        ActiveParty {
            row_of: init.ids.iter().enumerate().map(|(i, &id)| (id, i)).collect(),
            topo: init.topo,
            features: init.features,
            labels: init.labels,
            weights: init.weights,
            bias: Array1::zeros(hidden),
            holder: init.holder,
            keys: KeyRing::default(),
            batch_rng: init.batch_rng,
            key_rng: init.key_rng,
            mode: init.mode,
            codec: init.codec,
            lr: init.lr,
            batch: Vec::new(),
            batch_rows: Array2::zeros((0, 0)),
        }
    }

    pub fn keys(&self) -> &KeyRing {
        &self.keys
    }

    /// The full first layer, active rows first then each cluster's rows.
    pub fn weights(&self) -> &Array2<f64> {
        &self.weights
    }

    pub fn bias(&self) -> &Array1<f64> {
        &self.bias
    }

    pub(super) fn set_parameters(&mut self, weights: Array2<f64>, bias: Array1<f64>) {
        self.weights = weights;
        self.bias = bias;
    }

    pub fn last_batch(&self) -> &[u64] {
        &self.batch
    }

    pub fn label_of(&self, id: u64) -> Option<f64> {
        self.row_of.get(&id).map(|&r| self.labels[r])
    }

    pub(super) fn offer_keys(&mut self, net: &Network, epoch: u64, round: u32) -> Result<()> {
        offer_keys(net, 0, &self.topo, &mut self.keys, &mut self.key_rng, epoch, round)
    }

    pub(super) fn accept_keys(&mut self, net: &Network, epoch: u64, round: u32) -> Result<()> {
        accept_keys(net, 0, &self.topo, &mut self.keys, epoch, round)
    }

    /// Samples `b` training IDs without replacement.
    pub(super) fn select_batch(&mut self, pool: &[u64], b: usize) -> Vec<u64> {
        let b = b.min(pool.len());
        sample(&mut self.batch_rng, pool.len(), b)
            .into_iter()
            .map(|i| pool[i])
            .collect()
    }

    /// Announces `batch` to every cluster, and optionally ships labels and
    /// the current weight slices.
    pub(super) fn start_round(
        &mut self,
        net: &Network,
        batch: Vec<u64>,
        send_labels: bool,
        send_weights: bool,
        epoch: u64,
        round: u32,
    ) -> Result<()> {
        let agg = self.topo.aggregator;
        let rows: Vec<usize> = batch
            .iter()
            .map(|id| {
                self.row_of
                    .get(id)
                    .copied()
                    .ok_or_else(|| ProtocolError::Config(format!("sample {id} is not held by the active party")))
            })
            .collect::<Result<_>>()?;
        self.batch_rows = self.features.select(Axis(0), &rows);
        let send = |tag, payload| net.send(Envelope::new(tag, 0, agg, epoch as u32, round, payload));

        for c in &self.topo.clusters {
            let payload = match self.mode {
                Mode::Plain => Writer::new()
                    .u16(c.id)
                    .words(batch.iter().copied())
                    .finish(),
                Mode::Secured => {
                    let entries: Vec<EncryptedIdBatch> = batch
                        .iter()
                        .enumerate()
                        .map(|(slot, &id)| {
                            let key = match self.holder.get(&(c.id, id)).and_then(|m| self.keys.get(*m)) {
                                Some(k) => k.sym_key,
                                None => self.key_rng.gen(),
                            };
                            encrypt_sample_ids(&key, c.id, &[id], pack_nonce(round, 0, c.id, slot as u32))
                        })
                        .collect();
                    wire::secured_batch(c.id, &entries)
                }
            };
            send(Tag::EncryptedBatch, payload)?;
        }
        if send_labels {
            let labels: Vec<u8> = rows.iter().map(|&r| (self.labels[r] >= 0.5) as u8).collect();
            send(Tag::Labels, Writer::new().u32(labels.len() as u32).bytes(&labels).finish())?;
        }
        if send_weights {
            for c in &self.topo.clusters {
                let slice = self.weights.slice(s![c.rows.clone(), ..]).to_owned();
                send(Tag::WeightSlice, Writer::new().u16(c.id).matrix(&slice).finish())?;
            }
        }
        self.batch = batch;
        Ok(())
    }

    pub(super) fn send_activation(&self, net: &Network, epoch: u64, round: u32) -> Result<()> {
        let shard = ModelShard {
            weights: self.weights.slice(s![self.topo.active_rows.clone(), ..]).to_owned(),
            bias: Some(self.bias.clone()),
            owned_columns: Vec::new(),
        };
        let presence = vec![true; self.batch.len()];
        let act = local_forward(&shard, self.batch_rows.view(), &presence)
            .map_err(|source| ProtocolError::Model { round, party: 0, source })?;
        let plain: Vec<f64> = act.values.iter().copied().collect();
        let words = masked_words(
            0,
            &plain,
            self.mode,
            &self.codec,
            &self.topo.clients(),
            &self.keys,
            MaskStream::new(epoch, round, Direction::Forward, 0),
        )?;
        net.send(Envelope::new(
            Tag::MaskedActivation,
            0,
            self.topo.aggregator,
            epoch as u32,
            round,
            Writer::new().words(words.into_iter()).finish(),
        ))?;
        Ok(())
    }

    /// Receives the hidden delta and the per-cluster gradient sums,
    /// removes its own backward masks and applies SGD. Returns the batch loss.
    pub(super) fn finish_round(&mut self, net: &Network, epoch: u64, round: u32) -> Result<f64> {
        let agg = self.topo.aggregator;
        let env = take(net, 0, agg, Tag::Delta, round)?;
        let mut r = Reader::new(&env.payload);
        let delta = r.matrix().map_err(|_| malformed(&env))?;
        let h = self.weights.ncols();
        if delta.dim() != (self.batch.len(), h) {
            return Err(malformed(&env));
        }

        let presence = vec![true; self.batch.len()];
        let own = local_backward(delta.view(), self.batch_rows.view(), &presence, true)
            .map_err(|source| ProtocolError::Model { round, party: 0, source })?;
        let mut grad = Array2::zeros(self.weights.dim());
        grad.slice_mut(s![self.topo.active_rows.clone(), ..]).assign(&own.weights);

        for c in &self.topo.clusters {
            let env = net
                .recv(0, |e| {
                    e.sender == agg
                        && e.tag == Tag::GradientForward
                        && e.round == round
                        && e.payload.get(..2) == Some(&c.id.to_le_bytes()[..])
                })?
                .ok_or(ProtocolError::MissingContribution {
                    round,
                    party: agg,
                    tag: Tag::GradientForward,
                })?;
            let mut r = Reader::new(&env.payload);
            r.u16().map_err(|_| malformed(&env))?;
            let words = r.words().map_err(|_| malformed(&env))?;
            let len = c.rows.len() * h;
            if words.len() != len {
                return Err(malformed(&env));
            }
            let values: Vec<f64> = match self.mode {
                Mode::Plain => wire::words_f64(&words),
                Mode::Secured => {
                    let mask = compute_mask(
                        0,
                        &self.topo.backward_group(c),
                        &self.keys.seeds(),
                        len,
                        MaskStream::new(epoch, round, Direction::Backward, c.id),
                    )
                    .map_err(|source| ProtocolError::Masking { round, party: 0, source })?;
                    let sum: Vec<Ring> = words.iter().zip(&mask.elements).map(|(&w, &m)| Ring(w) + m).collect();
                    self.codec.decode_all(&sum)
                }
            };
            let block = Array2::from_shape_vec((c.rows.len(), h), values).expect("length checked");
            grad.slice_mut(s![c.rows.clone(), ..]).assign(&block);
        }

        let model_err = |source| ProtocolError::Model { round, party: 0, source };
        sgd_step(&mut self.weights, &grad, self.lr).map_err(model_err)?;
        sgd_step(&mut self.bias, own.bias.as_ref().expect("requested with bias"), self.lr).map_err(model_err)?;

        let ack = take(net, 0, agg, Tag::Ack, round)?;
        Reader::new(&ack.payload).f64().map_err(|_| malformed(&ack))
    }

    pub(super) fn receive_predictions(&self, net: &Network, round: u32) -> Result<Vec<f64>> {
        let env = take(net, 0, self.topo.aggregator, Tag::Prediction, round)?;
        let probs = wire::words_f64(&words_of(&env)?);
        if probs.len() != self.batch.len() {
            return Err(malformed(&env));
        }
        Ok(probs)
    }
}

/// Holds a vertical feature block for a subset of samples.
pub struct PassiveParty {
    index: u16,
    cluster: u16,
    topo: Topology,
    features: Array2<f64>,
    row_of: HashMap<u64, usize>,
    slice: Option<Array2<f64>>,
    keys: KeyRing,
    key_rng: ChaCha20Rng,
    mode: Mode,
    codec: FixedPointCodec,
    view: Vec<(usize, u64)>,
    presence: Vec<bool>,
    batch_rows: Array2<f64>,
}

impl PassiveParty {
    pub(super) fn new(
        index: u16,
        topo: Topology,
        ids: &[u64],
        features: Array2<f64>,
        key_rng: ChaCha20Rng,
        mode: Mode,
        codec: FixedPointCodec,
    ) -> Self {
        let cluster = topo.cluster_of(index).expect("passive party belongs to a cluster").id;
        PassiveParty {
            index,
            cluster,
            topo,
            row_of: ids.iter().enumerate().map(|(i, &id)| (id, i)).collect(),
            features,
            slice: None,
            keys: KeyRing::default(),
            key_rng,
            mode,
            codec,
            view: Vec::new(),
            presence: Vec::new(),
            batch_rows: Array2::zeros((0, 0)),
        }
    }

    pub fn index(&self) -> u16 {
        self.index
    }

    pub fn cluster(&self) -> u16 {
        self.cluster
    }

    pub fn keys(&self) -> &KeyRing {
        &self.keys
    }

    /// `(slot, id)` for every batch sample this party recognised.
    pub fn view(&self) -> &[(usize, u64)] {
        &self.view
    }

    pub fn holds(&self, id: u64) -> bool {
        self.row_of.contains_key(&id)
    }

    pub(super) fn offer_keys(&mut self, net: &Network, epoch: u64, round: u32) -> Result<()> {
        offer_keys(net, self.index, &self.topo, &mut self.keys, &mut self.key_rng, epoch, round)
    }

    pub(super) fn accept_keys(&mut self, net: &Network, epoch: u64, round: u32) -> Result<()> {
        accept_keys(net, self.index, &self.topo, &mut self.keys, epoch, round)
    }

    /// Learns which batch slots it holds: by trial decryption in secured
    /// mode, by ID lookup in plain mode. Picks up a new weight slice if one
    /// was sent.
    pub(super) fn receive_batch(&mut self, net: &Network, round: u32) -> Result<()> {
        let me = self.index;
        let agg = self.topo.aggregator;
        let env = take(net, me, agg, Tag::EncryptedBatch, round)?;
        let mut r = Reader::new(&env.payload);
        let candidates: Vec<Option<u64>> = match self.mode {
            Mode::Plain => {
                r.u16().map_err(|_| malformed(&env))?;
                let ids = r.words().map_err(|_| malformed(&env))?;
                r.end().map_err(|_| malformed(&env))?;
                ids.into_iter().map(Some).collect()
            }
            Mode::Secured => {
                let (_, entries) = wire::read_secured_batch(&env.payload).map_err(|_| malformed(&env))?;
                let key = self
                    .keys
                    .get(0)
                    .ok_or(ProtocolError::Crypto {
                        round,
                        party: me,
                        source: CryptoError::InvalidPublicKey("no key shared with the active party"),
                    })?
                    .sym_key;
                entries
                    .iter()
                    .map(|e| match decrypt_sample_ids(&key, e) {
                        Ok(ids) if ids.len() == 1 => Some(ids[0]),
                        _ => None,
                    })
                    .collect()
            }
        };

        let width = self.features.ncols();
        self.presence = vec![false; candidates.len()];
        self.view.clear();
        self.batch_rows = Array2::zeros((candidates.len(), width));
        for (slot, id) in candidates.into_iter().enumerate() {
            if let Some(&row) = id.and_then(|id| self.row_of.get(&id)) {
                self.presence[slot] = true;
                self.view.push((slot, id.unwrap()));
                self.batch_rows.row_mut(slot).assign(&self.features.row(row));
            }
        }

        if let Some(env) = net.recv(me, |e| e.sender == agg && e.tag == Tag::WeightSlice && e.round == round)? {
            let mut r = Reader::new(&env.payload);
            r.u16().map_err(|_| malformed(&env))?;
            let slice = r.matrix().map_err(|_| malformed(&env))?;
            if slice.nrows() != width {
                return Err(malformed(&env));
            }
            self.slice = Some(slice);
        }
        Ok(())
    }

    fn shard(&self) -> Result<ModelShard> {
        let weights = self
            .slice
            .clone()
            .ok_or_else(|| ProtocolError::Config(format!("party {} has no weight slice", self.index)))?;
        Ok(ModelShard {
            weights,
            bias: None,
            owned_columns: Vec::new(),
        })
    }

    pub(super) fn send_activation(&self, net: &Network, epoch: u64, round: u32) -> Result<()> {
        let act = local_forward(&self.shard()?, self.batch_rows.view(), &self.presence)
            .map_err(|source| ProtocolError::Model { round, party: self.index, source })?;
        let plain: Vec<f64> = act.values.iter().copied().collect();
        let words = masked_words(
            self.index,
            &plain,
            self.mode,
            &self.codec,
            &self.topo.clients(),
            &self.keys,
            MaskStream::new(epoch, round, Direction::Forward, 0),
        )?;
        net.send(Envelope::new(
            Tag::MaskedActivation,
            self.index,
            self.topo.aggregator,
            epoch as u32,
            round,
            Writer::new().words(words.into_iter()).finish(),
        ))?;
        Ok(())
    }

    pub(super) fn send_gradient(&self, net: &Network, epoch: u64, round: u32) -> Result<()> {
        let env = take(net, self.index, self.topo.aggregator, Tag::Delta, round)?;
        let delta = Reader::new(&env.payload).matrix().map_err(|_| malformed(&env))?;
        if delta.nrows() != self.presence.len() {
            return Err(malformed(&env));
        }
        let grad = local_backward(delta.view(), self.batch_rows.view(), &self.presence, false)
            .map_err(|source| ProtocolError::Model { round, party: self.index, source })?;
        let plain: Vec<f64> = grad.weights.iter().copied().collect();
        let cluster = self.topo.cluster_of(self.index).expect("member of a cluster");
        let words = masked_words(
            self.index,
            &plain,
            self.mode,
            &self.codec,
            &self.topo.backward_group(cluster),
            &self.keys,
            MaskStream::new(epoch, round, Direction::Backward, cluster.id),
        )?;
        net.send(Envelope::new(
            Tag::MaskedGradient,
            self.index,
            self.topo.aggregator,
            epoch as u32,
            round,
            Writer::new().words(words.into_iter()).finish(),
        ))?;
        Ok(())
    }
}

/// Relays traffic, sums masked contributions and owns the output layer.
pub struct Aggregator {
    topo: Topology,
    global: GlobalModule,
    mode: Mode,
    codec: FixedPointCodec,
    lr: f64,
}

impl Aggregator {
    pub(super) fn new(topo: Topology, global: GlobalModule, mode: Mode, codec: FixedPointCodec, lr: f64) -> Self {
        Aggregator {
            topo,
            global,
            mode,
            codec,
            lr,
        }
    }

    pub fn global(&self) -> &GlobalModule {
        &self.global
    }

    pub(super) fn set_global(&mut self, global: GlobalModule) {
        self.global = global;
    }

    fn me(&self) -> u16 {
        self.topo.aggregator
    }

    pub(super) fn request_keys(&self, net: &Network, epoch: u64, round: u32) -> Result<()> {
        for c in self.topo.clients() {
            net.send(Envelope::new(Tag::PubKeyRequest, self.me(), c, epoch as u32, round, Vec::new()))?;
        }
        Ok(())
    }

    /// Routes each client's per-peer public keys to the intended peer.
    pub(super) fn relay_keys(&self, net: &Network, epoch: u64, round: u32) -> Result<()> {
        let clients = self.topo.clients();
        let mut inbound: BTreeMap<u16, Vec<(u16, [u8; KEY_LEN])>> = BTreeMap::new();
        for &c in &clients {
            let env = net
                .recv(self.me(), |e| e.sender == c && e.tag == Tag::PubKeySet && e.round == round)?
                .ok_or(ProtocolError::SetupTimeout { epoch, party: c })?;
            for (peer, pk) in wire::read_public_keys(&env.payload).map_err(|_| malformed(&env))? {
                inbound.entry(peer).or_default().push((c, pk));
            }
        }
        for &c in &clients {
            let entries = inbound.remove(&c).unwrap_or_default();
            net.send(Envelope::new(
                Tag::PubKeyForward,
                self.me(),
                c,
                epoch as u32,
                round,
                wire::public_keys(&entries),
            ))?;
        }
        Ok(())
    }

    /// Forwards each cluster's batch announcement and weight slice to the
    /// cluster's members.
    pub(super) fn relay_batch(&self, net: &Network, epoch: u64, round: u32) -> Result<()> {
        for tag in [Tag::EncryptedBatch, Tag::WeightSlice] {
            while let Some(env) = net.recv(self.me(), |e| e.sender == 0 && e.tag == tag && e.round == round)? {
                let cluster = Reader::new(&env.payload).u16().map_err(|_| malformed(&env))?;
                let info = self
                    .topo
                    .clusters
                    .iter()
                    .find(|c| c.id == cluster)
                    .ok_or_else(|| malformed(&env))?;
                for &m in &info.members {
                    net.send(Envelope::new(tag, self.me(), m, epoch as u32, round, env.payload.clone()))?;
                }
            }
        }
        Ok(())
    }

    fn sum_contributions(&self, net: &Network, from: &[u16], tag: Tag, round: u32) -> Result<Vec<f64>> {
        let mut parts = Vec::with_capacity(from.len());
        for &p in from {
            let env = take(net, self.me(), p, tag, round)?;
            parts.push(words_of(&env)?);
        }
        let len = parts.first().map_or(0, Vec::len);
        if let Some(p) = from.iter().zip(&parts).find(|(_, w)| w.len() != len).map(|(p, _)| *p) {
            return Err(ProtocolError::Malformed { round, party: p, tag });
        }
        match self.mode {
            Mode::Plain => Ok((0..len).map(|k| parts.iter().map(|w| f64::from_bits(w[k])).sum()).collect()),
            Mode::Secured => {
                let rings: Vec<Vec<Ring>> = parts.into_iter().map(|w| w.into_iter().map(Ring).collect()).collect();
                let sum = sum_masked(&rings).map_err(|source| ProtocolError::Masking { round, party: self.me(), source })?;
                Ok(self.codec.decode_all(&sum))
            }
        }
    }

    fn aggregate_hidden(&self, net: &Network, round: u32) -> Result<Array2<f64>> {
        let z = self.sum_contributions(net, &self.topo.clients(), Tag::MaskedActivation, round)?;
        let h = self.global.weights.len();
        if z.len() % h != 0 {
            return Err(ProtocolError::Malformed {
                round,
                party: 0,
                tag: Tag::MaskedActivation,
            });
        }
        Ok(Array2::from_shape_vec((z.len() / h, h), z).expect("divisible"))
    }

    /// Forward to the loss, head update, and delta broadcast. Returns the loss.
    pub(super) fn train_step(&mut self, net: &Network, epoch: u64, round: u32) -> Result<f64> {
        let env = take(net, self.me(), 0, Tag::Labels, round)?;
        let mut r = Reader::new(&env.payload);
        let n = r.u32().map_err(|_| malformed(&env))? as usize;
        let labels: Vec<f64> = (0..n)
            .map(|_| r.u8().map(f64::from))
            .collect::<std::result::Result<_, _>>()
            .map_err(|_| malformed(&env))?;

        let z = self.aggregate_hidden(net, round)?;
        if z.nrows() != labels.len() {
            return Err(malformed(&env));
        }
        let model_err = |source| ProtocolError::Model {
            round,
            party: self.topo.aggregator,
            source,
        };
        let fwd = finish_forward(z.view(), &self.global).map_err(model_err)?;
        let (loss, dlogit) = bce_loss_and_delta(fwd.logits.view(), &labels);
        let (delta, gg) = backprop_hidden(dlogit.view(), &self.global, &fwd).map_err(model_err)?;
        sgd_step(&mut self.global.weights, &gg.weights, self.lr).map_err(model_err)?;
        self.global.bias -= self.lr * gg.bias;

        let payload = Writer::new().matrix(&delta).finish();
        for c in self.topo.clients() {
            net.send(Envelope::new(Tag::Delta, self.me(), c, epoch as u32, round, payload.clone()))?;
        }
        net.send(Envelope::new(
            Tag::Ack,
            self.me(),
            0,
            epoch as u32,
            round,
            Writer::new().f64(loss).finish(),
        ))?;
        Ok(loss)
    }

    /// Sums each cluster's gradient contributions and forwards them to the
    /// active party. Without the active party's mask the sums stay hidden.
    pub(super) fn backward_step(&self, net: &Network, epoch: u64, round: u32) -> Result<()> {
        for c in &self.topo.clusters {
            let mut parts = Vec::with_capacity(c.members.len());
            for &m in &c.members {
                parts.push(words_of(&take(net, self.me(), m, Tag::MaskedGradient, round)?)?);
            }
            let len = parts[0].len();
            if let Some(i) = parts.iter().position(|w| w.len() != len) {
                return Err(ProtocolError::Malformed {
                    round,
                    party: c.members[i],
                    tag: Tag::MaskedGradient,
                });
            }
            let sum: Vec<u64> = match self.mode {
                Mode::Plain => (0..len)
                    .map(|k| parts.iter().map(|w| f64::from_bits(w[k])).sum::<f64>().to_bits())
                    .collect(),
                Mode::Secured => (0..len)
                    .map(|k| parts.iter().map(|w| Ring(w[k])).sum::<Ring>().0)
                    .collect(),
            };
            net.send(Envelope::new(
                Tag::GradientForward,
                self.me(),
                0,
                epoch as u32,
                round,
                Writer::new().u16(c.id).words(sum.into_iter()).finish(),
            ))?;
        }
        Ok(())
    }

    pub(super) fn predict_step(&self, net: &Network, epoch: u64, round: u32) -> Result<()> {
        let z = self.aggregate_hidden(net, round)?;
        let fwd = finish_forward(z.view(), &self.global).map_err(|source| ProtocolError::Model {
            round,
            party: self.me(),
            source,
        })?;
        let probs: Vec<f64> = fwd.logits.iter().map(|&l| sigmoid(l)).collect();
        net.send(Envelope::new(
            Tag::Prediction,
            self.me(),
            0,
            epoch as u32,
            round,
            Writer::new().words(wire::f64_words(&probs)).finish(),
        ))?;
        Ok(())
    }
}
