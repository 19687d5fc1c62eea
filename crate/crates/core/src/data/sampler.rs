use rand::Rng;

use crate::error::{Error, Result};

/// Indices of an (anchor, pos, neg, neg2) draw.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Quadruplet {
    pub anchor: usize,
    pub pos: usize,
    pub neg: usize,
    pub neg2: usize,
}

/// Indices of an (anchor, pos, neg) draw.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Triplet {
    pub anchor: usize,
    pub pos: usize,
    pub neg: usize,
}

/// Image indices grouped by label.
#[derive(Clone, Debug)]
pub struct ClassIndex {
    labels: Vec<usize>,
    by_class: Vec<Vec<usize>>,
    /// Classes with at least two images.
    viable: Vec<usize>,
}

impl ClassIndex {
    pub fn new(labels: &[usize], num_classes: usize) -> Self {
        let mut by_class = vec![Vec::new(); num_classes];
        for (i, &y) in labels.iter().enumerate() {
            by_class[y].push(i);
        }
        let viable = (0..num_classes).filter(|&k| by_class[k].len() >= 2).collect();
        Self {
            labels: labels.to_vec(),
            by_class,
            viable,
        }
    }

    pub fn viable_classes(&self) -> &[usize] {
        &self.viable
    }

    pub fn class_members(&self, class: usize) -> &[usize] {
        &self.by_class[class]
    }

    fn image_in<R: Rng>(&self, classes: &[usize], rng: &mut R) -> usize {
        let total: usize = classes.iter().map(|&k| self.by_class[k].len()).sum();
        let mut r = rng.random_range(0..total);
        for &k in classes {
            let n = self.by_class[k].len();
            if r < n {
                return self.by_class[k][r];
            }
            r -= n;
        }
        unreachable!("index within total")
    }

    /// A same-class image other than `anchor`.
    fn partner<R: Rng>(&self, anchor: usize, rng: &mut R) -> usize {
        let members = &self.by_class[self.labels[anchor]];
        let at = members.iter().position(|&i| i == anchor).expect("anchor in its class");
        let r = rng.random_range(0..members.len() - 1);
        members[if r >= at { r + 1 } else { r }]
    }

    fn class_member<R: Rng>(&self, class: usize, rng: &mut R) -> usize {
        let m = &self.by_class[class];
        m[rng.random_range(0..m.len())]
    }

    /// One image: uniform over all images, or with `balance` a uniform class first.
    pub fn sample_single<R: Rng>(&self, rng: &mut R, balance: bool) -> Result<usize> {
        let present: Vec<usize> = (0..self.by_class.len()).filter(|&k| !self.by_class[k].is_empty()).collect();
        if present.is_empty() {
            return Err(Error::Config("cannot sample from an empty split".into()));
        }
        if balance {
            let k = present[rng.random_range(0..present.len())];
            Ok(self.class_member(k, rng))
        } else {
            Ok(rng.random_range(0..self.labels.len()))
        }
    }

    /// Uniform same-class distinct pair: anchor uniform over images of classes with two or more images.
    pub fn sample_pair<R: Rng>(&self, rng: &mut R) -> Result<(usize, usize)> {
        if self.viable.is_empty() {
            return Err(Error::Config("no class has two images to pair".into()));
        }
        let a = self.image_in(&self.viable, rng);
        Ok((a, self.partner(a, rng)))
    }

    fn anchor_and_negative<R: Rng>(&self, rng: &mut R, balance: bool) -> Result<(usize, usize)> {
        if self.viable.len() < 2 {
            return Err(Error::Config(format!(
                "negative sampling needs two classes with two images each, found {}",
                self.viable.len()
            )));
        }
        if balance {
            let ka = self.viable[rng.random_range(0..self.viable.len())];
            let others: Vec<usize> = self.viable.iter().copied().filter(|&k| k != ka).collect();
            let kn = others[rng.random_range(0..others.len())];
            Ok((self.class_member(ka, rng), self.class_member(kn, rng)))
        } else {
            let a = self.image_in(&self.viable, rng);
            let others: Vec<usize> = self.viable.iter().copied().filter(|&k| k != self.labels[a]).collect();
            Ok((a, self.image_in(&others, rng)))
        }
    }

    /// Anchor/pos from one class, neg/neg2 from another. With `balance`, the anchor
    /// class is uniform over classes and the negative class uniform over the rest.
    pub fn sample_quadruplet<R: Rng>(&self, rng: &mut R, balance: bool) -> Result<Quadruplet> {
        let (anchor, neg) = self.anchor_and_negative(rng, balance)?;
        let q = Quadruplet {
            anchor,
            pos: self.partner(anchor, rng),
            neg,
            neg2: self.partner(neg, rng),
        };
        let l = |i: usize| self.labels[i];
        assert!(
            l(q.anchor) == l(q.pos) && l(q.neg) == l(q.neg2) && l(q.anchor) != l(q.neg),
            "quadruplet label constraints violated: {q:?}"
        );
        Ok(q)
    }

    pub fn sample_triplet<R: Rng>(&self, rng: &mut R, balance: bool) -> Result<Triplet> {
        let (anchor, neg) = self.anchor_and_negative(rng, balance)?;
        let t = Triplet {
            anchor,
            pos: self.partner(anchor, rng),
            neg,
        };
        assert!(
            self.labels[t.anchor] == self.labels[t.pos] && self.labels[t.anchor] != self.labels[t.neg],
            "triplet label constraints violated: {t:?}"
        );
        Ok(t)
    }
}
