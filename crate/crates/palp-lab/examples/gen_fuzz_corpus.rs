//! Regenerate the seed corpus under fuzz/corpus/. Seeds are checked in;
//! rerun this after changing any of the fuzzed formats.
//!
//! ```text
//! cargo run --example gen_fuzz_corpus
//! ```

use std::fs;
use std::path::Path;

use palp_lab::denoiser::checkpoint::Checkpoint;
use palp_lab::denoiser::embed::EmbeddingTable;
use palp_lab::denoiser::params::{DenoiserParams, ModelConfig};
use palp_lab::diffusion::ScheduleSpec;
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;

fn put(dir: &Path, name: &str, bytes: &[u8]) {
    fs::create_dir_all(dir).expect("create corpus dir");
    fs::write(dir.join(name), bytes).expect("write seed");
    println!("{}", dir.join(name).display());
}

fn main() {
    let root = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../fuzz/corpus");

    // A structurally complete checkpoint with toy dimensions, so the fuzzer
    // starts from deep inside the happy path, plus a bare magic prefix.
    let mut rng = ChaCha12Rng::seed_from_u64(7);
    let config = ModelConfig {
        image_side: 4,
        hidden_width: 6,
        hidden_layers: 2,
        time_pairs: 2,
        cond_dim: 3,
        timesteps: 8,
    };
    let ckpt = Checkpoint {
        params: DenoiserParams::init(config, &mut rng),
        table: EmbeddingTable::with_attributes(&["photo", "sketch"], 3, &mut rng),
        lora: None,
        schedule: ScheduleSpec { timesteps: 8, beta_min: 4e-4, beta_max: 0.08 },
    };
    let dir = root.join("checkpoint_decode");
    put(&dir, "tiny.ckpt", &ckpt.encode());
    put(&dir, "magic_only.bin", &ckpt.encode()[..8.min(ckpt.encode().len())]);

    let dir = root.join("config_parse");
    put(
        &dir,
        "full.conf",
        b"# comment\nlr = 0.002\nsteps = 500\nbatch = 8\nseed = 7\nlambda = 1.0\n\
          mode = palp\nalpha = 15.0\nbeta = 7.5\nshare_noise = true\nrescale = true\n\
          subject = textured_diamond\nn_refs = 3\nsubject_seed = 1001\n\
          placeholder = [V]\ntarget_prompt = sketch [V] plain\nbase = a/b.bin\n\
          out = runs\neval_samples = 16\ncfg_scale = 3.0\n\
          data_per_cell = 50\ndata_seed = 20260110\n",
    );
    put(&dir, "sparse.conf", b"\n\n# only one key\nmode = baseline\n");
    put(&dir, "broken.conf", b"lr 0.002\n= x\n9key = 1\nlr = a\nlr = 0.1\nlr = 0.2\n");

    let dir = root.join("prompt_parse");
    put(&dir, "clean.txt", b"photo square plain");
    put(&dir, "personalized.txt", b"sketch [V] dots");
    put(&dir, "commas.txt", b"photo,circle,stripes");
    put(&dir, "junk.txt", b"  [ ] [] [[V]] \t, ,");

    let dir = root.join("grid_parse");
    put(&dir, "canonical.txt", b"0,10,25,50,100,150,200,249");
    put(&dir, "spaces.txt", b"10 60 120 240");
    put(&dir, "single.txt", b"249");
    put(&dir, "bad.txt", b"5,4,huh");

    let dir = root.join("csv_metrics_parse");
    put(
        &dir,
        "small.csv",
        b"run_id,mode,step,text_align,subject_sim,loss,seed\n\
          palp-seed7,palp,0,0.41,0.92,0.134,7\n\
          palp-seed7,palp,500,0.83,0.9,0.021,7\n\
          pre,pretrain,0,NaN,NaN,1.2,11\n",
    );
    put(&dir, "header_only.csv", b"run_id,mode,step,text_align,subject_sim,loss,seed\n");
    put(&dir, "bad.csv", b"run_id,mode,step,text_align,subject_sim,loss,seed\na,b,c\n");
}
