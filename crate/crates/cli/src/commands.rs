use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};

use flowdistill::checkpoint::Checkpoint;
use flowdistill::config::KvConfig;
use flowdistill::image_io::{read_image, write_image, Image};
use flowdistill::pipeline::{
    self, DistillMode, PipelineConfig, Student, StudentEpoch, TeacherEpoch, Tutor, STUDENT_ROLE, TUTOR_ROLE,
};
use flowdistill::synth::{TryOnSample, SEGMENTATION_CHANNELS};

pub const THREADS_VAR: &str = "FLOWDISTILL_THREADS";

/// A failure with the process exit status it maps to.
pub struct Failure {
    pub code: u8,
    pub message: String,
}

type CmdResult<T = ()> = std::result::Result<T, Failure>;

fn fail(e: impl std::fmt::Display) -> Failure {
    Failure {
        code: 1,
        message: e.to_string(),
    }
}

/// Configuration plus the path keys commands may read from it.
struct Loaded {
    pipeline: PipelineConfig,
    out: Option<PathBuf>,
    log: Option<PathBuf>,
    teacher: Option<PathBuf>,
}

fn load_config(path: &Path, seed: Option<u64>) -> CmdResult<Loaded> {
    let text = fs::read_to_string(path).map_err(|e| Failure {
        code: 2,
        message: format!("cannot read config {}: {e}", path.display()),
    })?;
    let bad = |e: flowdistill::Error| Failure {
        code: 2,
        message: format!("{}: {e}", path.display()),
    };
    let kv = KvConfig::parse(&text).map_err(bad)?;
    let key_path = |k: &str| kv.raw(k).map(PathBuf::from);
    let (out, log, teacher) = (key_path("out"), key_path("log"), key_path("teacher"));
    let mut pipeline = PipelineConfig::from_kv(&kv).map_err(bad)?;
    kv.finish().map_err(bad)?;
    if let Some(s) = seed {
        pipeline.seed = s;
    }
    Ok(Loaded {
        pipeline,
        out,
        log,
        teacher,
    })
}

/// Worker threads for data generation: `FLOWDISTILL_THREADS` if set,
/// otherwise the available parallelism.
fn threads() -> CmdResult<usize> {
    match std::env::var(THREADS_VAR) {
        Ok(v) => match v.trim().parse::<usize>() {
            Ok(n) if n > 0 => Ok(n),
            _ => Err(Failure {
                code: 2,
                message: format!("{THREADS_VAR} must be a positive integer, got `{v}`"),
            }),
        },
        Err(_) => Ok(std::thread::available_parallelism().map_or(1, |n| n.get())),
    }
}

/// Append-only log writer that emits `header` when the file starts empty.
struct EpochLog {
    file: fs::File,
    path: PathBuf,
}

impl EpochLog {
    fn open(path: &Path, header: &str) -> CmdResult<Self> {
        let mut log = OpenOptions::new()
            .create(true)
            .append(true)
            .open(path)
            .map(|file| EpochLog {
                file,
                path: path.to_path_buf(),
            })
            .map_err(|e| fail(format!("cannot open log {}: {e}", path.display())))?;
        let empty = log.file.metadata().map(|m| m.len() == 0).unwrap_or(true);
        if empty {
            log.line(header).map_err(|e| log.error(e))?;
        }
        Ok(log)
    }

    fn error(&self, e: std::io::Error) -> Failure {
        fail(format!("cannot write log {}: {e}", self.path.display()))
    }

    fn line(&mut self, line: &str) -> std::io::Result<()> {
        writeln!(self.file, "{line}")?;
        self.file.flush()
    }
}

fn log_path(explicit: Option<PathBuf>, checkpoint: &Path) -> PathBuf {
    explicit.unwrap_or_else(|| checkpoint.with_extension("log"))
}

pub fn train_teacher(config: &Path, seed: Option<u64>, out: Option<PathBuf>, log: Option<PathBuf>) -> CmdResult {
    let cfg = load_config(config, seed)?;
    let out = out.or(cfg.out).unwrap_or_else(|| PathBuf::from("teacher.ckpt"));
    let mut log = EpochLog::open(&log_path(log.or(cfg.log), &out), TeacherEpoch::HEADER)?;
    let data = cfg.pipeline.train_set(threads()?).map_err(fail)?;
    let mut write_err = None;
    let (tutor, _) = pipeline::train_teacher::<f32>(&data, &cfg.pipeline, |e| {
        if let Err(err) = log.line(&e.log_line()) {
            write_err.get_or_insert(err);
        }
    })
    .map_err(fail)?;
    if let Some(e) = write_err {
        return Err(log.error(e));
    }
    tutor.to_checkpoint().save(&out).map_err(fail)
}

pub fn train_student(
    config: &Path,
    seed: Option<u64>,
    teacher: Option<PathBuf>,
    distill: Option<DistillMode>,
    out: Option<PathBuf>,
    log: Option<PathBuf>,
) -> CmdResult {
    let mut cfg = load_config(config, seed)?;
    if let Some(mode) = distill {
        cfg.pipeline.distill = mode;
    }
    let teacher = teacher.or(cfg.teacher).ok_or_else(|| Failure {
        code: 2,
        message: "no tutor checkpoint: pass --teacher or set the `teacher` key".into(),
    })?;
    let ck = Checkpoint::load(&teacher).map_err(fail)?;
    ck.expect_role(TUTOR_ROLE).map_err(fail)?;
    let tutor = Tutor::<f32>::from_checkpoint(&ck, false).map_err(fail)?;
    pipeline::check_compatible(tutor.net_config(), &cfg.pipeline.net).map_err(fail)?;

    let out = out.or(cfg.out).unwrap_or_else(|| PathBuf::from("student.ckpt"));
    let mut log = EpochLog::open(&log_path(log.or(cfg.log), &out), StudentEpoch::HEADER)?;
    let data = cfg.pipeline.train_set(threads()?).map_err(fail)?;
    let mut write_err = None;
    let (student, _) = pipeline::train_student(&tutor, &data, &cfg.pipeline, |e| {
        if let Err(err) = log.line(&e.log_line()) {
            write_err.get_or_insert(err);
        }
    })
    .map_err(fail)?;
    if let Some(e) = write_err {
        return Err(log.error(e));
    }
    student.to_checkpoint().save(&out).map_err(fail)
}

/// `out` with `-warp` appended to the file stem.
pub fn warp_path(out: &Path) -> PathBuf {
    let stem = out.file_stem().map_or_else(Default::default, |s| s.to_string_lossy().into_owned());
    let name = match out.extension() {
        Some(ext) => format!("{stem}-warp.{}", ext.to_string_lossy()),
        None => format!("{stem}-warp"),
    };
    out.with_file_name(name)
}

pub fn infer(student: &Path, person: &Path, clothes: &Path, out: &Path, dump_warp: bool) -> CmdResult {
    let ck = Checkpoint::load(student).map_err(fail)?;
    ck.expect_role(STUDENT_ROLE).map_err(fail)?;
    let student = Student::<f32>::from_checkpoint(&ck).map_err(fail)?;
    let person = read_image(person).map_err(fail)?;
    let clothes = read_image(clothes).map_err(fail)?;
    let (image, warped) = pipeline::infer(&student, &person, &clothes).map_err(fail)?;
    write_image(out, &image).map_err(fail)?;
    if dump_warp {
        write_image(&warp_path(out), &warped).map_err(fail)?;
    }
    Ok(())
}

const PARSING_PALETTE: [[f32; 3]; 4] = [
    [0.9, 0.6, 0.3],
    [-0.8, 0.7, -0.2],
    [0.3, -0.7, 0.9],
    [-0.6, -0.6, 0.8],
];

/// Segmentation as a colour label map, background black.
fn parsing_image(sample: &TryOnSample) -> Image {
    let (h, w) = (sample.person.height, sample.person.width);
    let mut img = Image::filled(3, h, w, -1.0);
    for (class, ch) in SEGMENTATION_CHANNELS.enumerate() {
        for (i, &m) in sample.representation.plane(ch).iter().enumerate() {
            if m > 0.5 {
                for c in 0..3 {
                    img.data[c * h * w + i] = PARSING_PALETTE[class][c];
                }
            }
        }
    }
    img
}

/// Maximum over keypoint heatmaps as a grey image.
fn pose_image(sample: &TryOnSample) -> Image {
    let pose = sample.pose();
    let n = pose.height * pose.width;
    let mut img = Image::filled(3, pose.height, pose.width, -1.0);
    for i in 0..n {
        let peak = (0..pose.channels).map(|c| pose.data[c * n + i]).fold(0.0f32, f32::max);
        for c in 0..3 {
            img.data[c * n + i] = 2.0 * peak.clamp(0.0, 1.0) - 1.0;
        }
    }
    img
}

pub const MANIFEST: &str = "manifest.txt";

pub fn make_dataset(config: &Path, seed: Option<u64>, out: &Path) -> CmdResult {
    let cfg = load_config(config, seed)?.pipeline;
    fs::create_dir_all(out).map_err(|e| fail(format!("cannot create {}: {e}", out.display())))?;
    let data = cfg.train_set(threads()?).map_err(fail)?;
    let mut manifest = format!(
        "flowdistill-dataset 1\nseed = {}\nsamples = {}\nheight = {}\nwidth = {}\ncorruption = {}\n",
        cfg.train_seed(),
        data.len(),
        cfg.height,
        cfg.width,
        cfg.corruption
    );
    for (i, s) in data.iter().enumerate() {
        let files = [
            ("person", s.person.clone()),
            ("clothes", s.clothes.clone()),
            ("alt_clothes", s.alt_clothes.clone()),
            ("alt_person", s.alt_person.clone()),
            ("parsing", parsing_image(s)),
            ("pose", pose_image(s)),
        ];
        let mut entry = format!("sample {i} seed={} corrupted={}", s.seed, u8::from(s.corrupted));
        for (kind, image) in files {
            let name = format!("{i:04}_{kind}.ppm");
            write_image(&out.join(&name), &image).map_err(fail)?;
            entry.push_str(&format!(" {kind}={name}"));
        }
        manifest.push_str(&entry);
        manifest.push('\n');
    }
    let path = out.join(MANIFEST);
    fs::write(&path, manifest).map_err(|e| fail(format!("cannot write {}: {e}", path.display())))
}
