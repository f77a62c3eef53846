//! The four dense prediction tasks, all derived from one underlying
//! segmentation geometry so that multi-task sharing is actually useful.

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TaskKind {
    /// 4-way semantic segmentation (background + three shape classes).
    Seg,
    /// Binary boundary map (label discontinuities).
    Boundary,
    /// Signed, normalized distance to the nearest boundary pixel.
    Distance,
    /// Unit 2D orientation field (gradient of the distance map).
    Normals,
}

#[derive(Clone, Copy, Debug)]
pub struct TaskSpec {
    pub kind: TaskKind,
    pub name: &'static str,
    /// Prediction channels per pixel.
    pub channels: usize,
    pub metric: &'static str,
    /// Whether larger metric values are better.
    pub higher_better: bool,
}

pub const TASKS: [TaskSpec; 4] = [
    TaskSpec { kind: TaskKind::Seg, name: "seg", channels: 4, metric: "miou", higher_better: true },
    TaskSpec {
        kind: TaskKind::Boundary,
        name: "boundary",
        channels: 1,
        metric: "f1",
        higher_better: true,
    },
    TaskSpec {
        kind: TaskKind::Distance,
        name: "distance",
        channels: 1,
        metric: "rmse",
        higher_better: false,
    },
    TaskSpec {
        kind: TaskKind::Normals,
        name: "normals",
        channels: 2,
        metric: "merr",
        higher_better: false,
    },
];

pub const SEG_CLASSES: usize = 4;

pub fn head_channels() -> Vec<usize> {
    TASKS.iter().map(|t| t.channels).collect()
}

pub fn by_name(name: &str) -> Option<(usize, &'static TaskSpec)> {
    TASKS.iter().enumerate().find(|(_, t)| t.name == name)
}
