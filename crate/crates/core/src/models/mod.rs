//! Trainable components and the bundle that holds them.

mod networks;
mod params;
mod transformer;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub use networks::{
    discriminator_loss, generator_adv_loss, perceptual_loss, Decoder, Discriminator, Encoder, PerceptualNet,
    IMAGE_SIZE, LATENT_GRID, PERCEPTUAL_SEED,
};
pub use params::{Bound, ParamStore};
pub use transformer::{argmax_rows, CodeTransformer, ScoreEmbedding, TransformerConfig, NUM_BINS, NUM_TOKENS};

use crate::vq::{Codebook, CodebookRole, CODE_DIM};

/// Every network of the pipeline. The perceptual extractor is rebuilt from
/// its fixed seed and never trained.
#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub encoder: Encoder,
    pub decoder: Decoder,
    pub common: Codebook,
    pub hq_plus: Codebook,
    pub discriminator: Discriminator,
    pub embedding: ScoreEmbedding,
    pub transformer: CodeTransformer,
    pub perceptual: PerceptualNet,
}

impl Model {
    pub fn new(seed: u64, transformer: TransformerConfig) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let encoder = Encoder::new(&mut rng);
        let decoder = Decoder::new(&mut rng);
        let common = Codebook::random(transformer.common_size, CODE_DIM, CodebookRole::Common, &mut rng);
        let hq_plus = Codebook::random(transformer.hq_size, CODE_DIM, CodebookRole::HqPlus, &mut rng);
        let discriminator = Discriminator::new(&mut rng);
        let embedding = ScoreEmbedding::new(&mut rng);
        let transformer = CodeTransformer::new(transformer, &mut rng);
        Self { encoder, decoder, common, hq_plus, discriminator, embedding, transformer, perceptual: PerceptualNet::new() }
    }
}
